//! 8-bit RGB images, PNG IO and conversions to model tensors.

use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("unsupported png layout {0:?}/{1:?}; expected 8-bit RGB")]
    Unsupported(png::ColorType, png::BitDepth),
    #[error("image buffer of {got} bytes does not match {width}x{height} RGB")]
    BadBuffer { width: usize, height: usize, got: usize },
    #[error("tensor shape {0:?} is not [1, 3, H, W]")]
    BadTensor(Vec<usize>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Interleaved RGB, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 || data.len() != width * height * 3 {
            return Err(ImageError::BadBuffer {
                width,
                height,
                got: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let decoder = png::Decoder::new(std::io::Cursor::new(bytes));
        let mut reader = decoder.read_info()?;
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
        let info = reader.next_frame(&mut buf)?;
        if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
            return Err(ImageError::Unsupported(info.color_type, info.bit_depth));
        }
        buf.truncate(info.buffer_size());
        Self::new(info.width as usize, info.height as usize, buf)
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self, ImageError> {
        Self::decode_png(&std::fs::read(path)?)
    }

    /// Deterministic PNG bytes for this image.
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, self.width as u32, self.height as u32);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.set_compression(png::Compression::Balanced);
            enc.set_filter(png::Filter::Paeth);
            let mut w = enc.write_header()?;
            w.write_image_data(&self.data)?;
            w.finish()?;
        }
        Ok(out)
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    /// `[1, 3, H, W]` tensor with samples divided by 255.
    pub fn to_tensor(&self) -> Tensor {
        let plane = self.width * self.height;
        Tensor::from_fn(vec![1, 3, self.height, self.width], |i| {
            let (c, p) = (i / plane, i % plane);
            self.data[3 * p + c] as f32 / 255.0
        })
    }

    /// Inverse of [`to_tensor`](Self::to_tensor): clamp to `[0, 1]`, scale, round.
    pub fn from_tensor(t: &Tensor) -> Result<Self, ImageError> {
        let s = t.shape();
        if s.len() != 4 || s[0] != 1 || s[1] != 3 {
            return Err(ImageError::BadTensor(s.to_vec()));
        }
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        let mut data = vec![0u8; 3 * plane];
        for (i, &v) in t.data().iter().enumerate() {
            let (c, p) = (i / plane, i % plane);
            data[3 * p + c] = to_u8(v);
        }
        Self::new(w, h, data)
    }

    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Self, ImageError> {
        if x + width > self.width || y + height > self.height {
            return Err(ImageError::BadBuffer {
                width,
                height,
                got: self.data.len(),
            });
        }
        let mut data = Vec::with_capacity(width * height * 3);
        for row in y..y + height {
            let start = 3 * (row * self.width + x);
            data.extend_from_slice(&self.data[start..start + 3 * width]);
        }
        Self::new(width, height, data)
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks_exact(3 * self.width) {
            for px in row.chunks_exact(3).rev() {
                data.extend_from_slice(px);
            }
        }
        Self {
            data,
            ..self.clone()
        }
    }
}

/// Round half away from zero after clamping to `[0, 1]`.
pub fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn reflect_index(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i % period;
    if m < n {
        m
    } else {
        period - m
    }
}

/// Smallest multiple of `m` that is `>= v`.
pub fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Extends the bottom and right edges by mirror reflection (edge sample not repeated)
/// up to the next multiple of `multiple`.
pub fn reflect_pad(t: &Tensor, multiple: usize) -> Tensor {
    let s = t.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (ph, pw) = (round_up(h, multiple), round_up(w, multiple));
    if (ph, pw) == (h, w) {
        return t.clone();
    }
    let src = t.data();
    Tensor::from_fn(vec![n, c, ph, pw], |i| {
        let x = i % pw;
        let y = (i / pw) % ph;
        let nc = i / (pw * ph);
        src[(nc * h + reflect_index(y, h)) * w + reflect_index(x, w)]
    })
}

/// Top-left `h x w` window of an `[N, C, H, W]` tensor.
pub fn crop_tensor(t: &Tensor, h: usize, w: usize) -> Tensor {
    let s = t.shape();
    let (n, c, sh, sw) = (s[0], s[1], s[2], s[3]);
    debug_assert!(h <= sh && w <= sw);
    let src = t.data();
    Tensor::from_fn(vec![n, c, h, w], |i| {
        let x = i % w;
        let y = (i / w) % h;
        let nc = i / (w * h);
        src[(nc * sh + y) * sw + x]
    })
}

/// Procedural test image: a smooth colour gradient overlaid with random
/// rectangles, discs and a faint texture, giving edges and flat regions.
pub fn synthetic_image<R: Rng>(width: usize, height: usize, rng: &mut R) -> RgbImage {
    let mut px = vec![[0f32; 3]; width * height];
    let c0: [f32; 3] = rng.gen();
    let c1: [f32; 3] = rng.gen();
    let angle: f32 = rng.gen_range(0.0..std::f32::consts::TAU);
    let (dx, dy) = (angle.cos(), angle.sin());
    let diag = (width * width + height * height) as f32;
    for y in 0..height {
        for x in 0..width {
            let t = ((x as f32 * dx + y as f32 * dy) / diag.sqrt() + 1.0) / 2.0;
            for ch in 0..3 {
                px[y * width + x][ch] = c0[ch] * (1.0 - t) + c1[ch] * t;
            }
        }
    }
    let shapes = rng.gen_range(3..9);
    for _ in 0..shapes {
        let color: [f32; 3] = rng.gen();
        let cx = rng.gen_range(0.0..width as f32);
        let cy = rng.gen_range(0.0..height as f32);
        let rx = rng.gen_range(2.0..(width as f32 / 3.0).max(3.0));
        let ry = rng.gen_range(2.0..(height as f32 / 3.0).max(3.0));
        let disc = rng.gen_bool(0.5);
        for y in 0..height {
            for x in 0..width {
                let u = (x as f32 - cx) / rx;
                let v = (y as f32 - cy) / ry;
                let inside = if disc { u * u + v * v <= 1.0 } else { u.abs() <= 1.0 && v.abs() <= 1.0 };
                if inside {
                    px[y * width + x] = color;
                }
            }
        }
    }
    let freq = rng.gen_range(0.2..0.8f32);
    let amp = rng.gen_range(0.0..0.06f32);
    let mut data = Vec::with_capacity(width * height * 3);
    for (i, p) in px.iter().enumerate() {
        let (x, y) = ((i % width) as f32, (i / width) as f32);
        let tex = amp * (freq * x).sin() * (freq * 0.7 * y).cos();
        for &v in p {
            data.push(to_u8(v + tex + rng.gen_range(-0.01..0.01)));
        }
    }
    RgbImage {
        width,
        height,
        data,
    }
}
