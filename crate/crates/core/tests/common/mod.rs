//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nic_core::image::synthetic_image;
use nic_core::overfit::OverfitProblem;
use nic_core::pipeline::encode_baseline;
use nic_core::{ArchConfig, Graph, ModelParams, RdInterp, RdPoint, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Largest relative gap between backprop and finite differences over every input element.
/// Each element is compared against the central, forward and backward differences and the
/// closest one counts: piecewise-linear activations put kinks inside some stencils, and then
/// the one-sided difference taken away from the kink is the exact derivative while the central
/// one averages two slopes. A wrong gradient still disagrees with all three.
/// The denominator is floored at 1e-6 of the largest gradient magnitude so that entries that
/// are zero up to round-off do not dominate.
pub fn fd_max_rel_error(
    inputs: &[Tensor<f64>],
    h: f64,
    mut f: impl FnMut(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let mut eval = |xs: &[Tensor<f64>], grads: bool| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
        let out = f(&mut g, &vars);
        let value = g.value(out).item();
        let gs = if grads {
            g.backward(out).unwrap();
            vars.iter()
                .map(|&v| g.grad(v).map_or_else(|| vec![0.0; g.value(v).numel()], |t| t.data().to_vec()))
                .collect()
        } else {
            Vec::new()
        };
        (value, gs)
    };
    let (f0, analytic) = eval(inputs, true);
    let mut numeric = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        let mut col = Vec::with_capacity(x.numel());
        for j in 0..x.numel() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + h;
            let (fp, _) = eval(&xs, false);
            xs[i].data_mut()[j] = x.data()[j] - h;
            let (fm, _) = eval(&xs, false);
            col.push([(fp - fm) / (2.0 * h), (fp - f0) / h, (f0 - fm) / h]);
        }
        numeric.push(col);
    }
    let scale = analytic.iter().flatten().fold(0f64, |m, v| m.max(v.abs())).max(1.0);
    let mut worst = 0f64;
    for (a, ns) in analytic.iter().flatten().zip(numeric.iter().flatten()) {
        let err = ns
            .iter()
            .map(|n| (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * scale))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(err);
    }
    worst
}

/// An untrained model whose output lies well inside `(0, 1)`. Freshly initialized decoders
/// spread outputs over several units, so much of the image sits on the clamp's kinks where
/// central differences are meaningless.
pub fn centred_model(seed: u64) -> ModelParams {
    centred(&ArchConfig::default(), seed)
}

pub fn centred(arch: &ArchConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::init(arch, seed).unwrap();
    let last = params.decoder.last_mut().unwrap();
    last.weight.data_mut().iter_mut().for_each(|w| *w *= 0.02);
    last.bias.data_mut().iter_mut().for_each(|b| *b = 0.5);
    params
}

/// An overfit problem on [`centred_model`] and a synthetic image, with anchors at the
/// baseline point and a point 3 dB higher at twice the rate.
pub fn overfit_problem(seed: u64, layers: usize, width: usize, height: usize) -> (OverfitProblem, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = centred_model(seed);
    let img = synthetic_image(width, height, &mut rng);
    let base = encode_baseline(&params, &img, 1).unwrap();
    let bits = base.code.payload_bits() as f64;
    let r = RdInterp::new(RdPoint::new(bits, base.psnr), RdPoint::new(2.0 * bits, base.psnr + 3.0)).unwrap();
    let problem = OverfitProblem::new(&params, &base, layers, r, 64.0).unwrap();
    (problem, rng)
}

pub mod golden {
    //! Golden files: regenerated with `NIC_BLESS=1`, otherwise compared byte-for-byte.

    use std::path::PathBuf;

    use nic_core::entropy::{encode_symbols, CdfTable};
    use nic_core::image::synthetic_image;
    use nic_core::overfit::{encode_overfit, OverfitConfig};
    use nic_core::pipeline::encode_baseline;
    use nic_core::{ArchConfig, ModelParams, RdInterp, RdPoint, RgbImage};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub const MODEL_SEED: u64 = 2024;

    /// Resolved through the workspace so other crates' tests can share it.
    pub fn dir() -> PathBuf {
        PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/golden")
    }

    pub fn image() -> RgbImage {
        synthetic_image(40, 24, &mut ChaCha8Rng::seed_from_u64(2))
    }

    /// Model behind the golden containers: seeded init with the output layer centred.
    pub fn model(arch: &ArchConfig) -> ModelParams {
        super::centred(arch, MODEL_SEED)
    }

    fn range_stream() -> Vec<u8> {
        let tables = [
            CdfTable::build(&[0.5, 0.25, 0.125, 0.125], -2).unwrap(),
            CdfTable::build(&[1.0], 7).unwrap(),
            CdfTable::uniform(300, -150).unwrap(),
        ];
        let symbols: Vec<i32> = (0..3000).map(|i| match i % 3 {
            0 => (i as i32 * 7) % 4 - 2,
            1 => 7,
            _ => (i as i32 * 31) % 300 - 150,
        }).collect();
        let refs: Vec<&CdfTable> = (0..3000).map(|i| &tables[i % 3]).collect();
        encode_symbols(&symbols, &refs).unwrap()
    }

    /// Containers (with the model that decodes them) and the range-coder stream, by file name.
    pub fn containers() -> Vec<(&'static str, ArchConfig, Vec<u8>)> {
        let img = image();
        let hyper = ArchConfig::default();
        let fact = ArchConfig::factorized();
        let hp = model(&hyper);
        let base = encode_baseline(&hp, &img, 1).unwrap();
        let bits = base.code.payload_bits() as f64;
        let r = RdInterp::new(RdPoint::new(bits, base.psnr), RdPoint::new(1.5 * bits, base.psnr + 2.0)).unwrap();
        let cfg = OverfitConfig {
            layers: 2,
            iterations: 40,
            learning_rate: 1e-2,
            seed: 5,
            ..OverfitConfig::default()
        };
        let over = encode_overfit(&hp, &base, r, &cfg).unwrap();
        let fb = encode_baseline(&model(&fact), &img, 1).unwrap();
        vec![
            ("hyper_baseline.nc", hyper.clone(), base.bytes),
            ("hyper_overfit_l2.nc", hyper, over.bytes),
            ("factorized_baseline.nc", fact, fb.bytes),
        ]
    }

    pub fn range_file() -> (&'static str, Vec<u8>) {
        ("range.bin", range_stream())
    }

    /// Decoded-PNG golden name for a container golden.
    pub fn decoded_name(container: &str) -> String {
        container.replace(".nc", ".png")
    }
}
