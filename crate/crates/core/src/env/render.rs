use serde::{Deserialize, Serialize};

/// Flat sprite colours, one per object index (cycled).
pub const PALETTE: [[f32; 3]; 8] = [
    [0.90, 0.10, 0.10],
    [0.10, 0.75, 0.15],
    [0.15, 0.25, 0.95],
    [0.95, 0.80, 0.10],
    [0.80, 0.15, 0.85],
    [0.10, 0.85, 0.85],
    [0.95, 0.50, 0.10],
    [0.55, 0.55, 0.55],
];

/// `H × W × C` image with values in `[0, 1]`, stored row-major in HWC order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelBuffer {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl PixelBuffer {
    pub fn blank(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn set(&mut self, y: usize, x: usize, rgb: &[f32; 3]) {
        let base = (y * self.width + x) * self.channels;
        for c in 0..self.channels.min(3) {
            self.data[base + c] = rgb[c];
        }
    }

    /// Axis-aligned filled rectangle, clipped to the image.
    pub fn fill_rect(&mut self, y0: i64, x0: i64, h: i64, w: i64, rgb: &[f32; 3]) {
        for y in y0.max(0)..(y0 + h).min(self.height as i64) {
            for x in x0.max(0)..(x0 + w).min(self.width as i64) {
                self.set(y as usize, x as usize, rgb);
            }
        }
    }

    /// Filled disc centred at pixel coordinates `(cy, cx)`, clipped.
    pub fn fill_disc(&mut self, cy: f64, cx: f64, radius: f64, rgb: &[f32; 3]) {
        let r2 = radius * radius;
        let y_lo = (cy - radius).floor().max(0.0) as usize;
        let x_lo = (cx - radius).floor().max(0.0) as usize;
        let y_hi = ((cy + radius).ceil() as i64).min(self.height as i64 - 1);
        let x_hi = ((cx + radius).ceil() as i64).min(self.width as i64 - 1);
        if y_hi < 0 || x_hi < 0 {
            return;
        }
        for y in y_lo..=y_hi as usize {
            for x in x_lo..=x_hi as usize {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                if dy * dy + dx * dx <= r2 {
                    self.set(y, x, rgb);
                }
            }
        }
    }

    /// Channel-major copy (`C·H·W`) for convolutional encoders.
    pub fn channel_major(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.data.len()];
        let plane = self.height * self.width;
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..self.channels {
                    out[c * plane + y * self.width + x] =
                        self.data[(y * self.width + x) * self.channels + c] as f64;
                }
            }
        }
        out
    }

    /// Intensity-weighted centroid `(y, x)` of channel `c`, `None` if empty.
    pub fn centroid(&self, c: usize) -> Option<(f64, f64)> {
        let (mut sy, mut sx, mut m) = (0.0, 0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                let v = self.get(y, x, c) as f64;
                sy += v * (y as f64 + 0.5);
                sx += v * (x as f64 + 0.5);
                m += v;
            }
        }
        (m > 0.0).then(|| (sy / m, sx / m))
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn from_u8(height: usize, width: usize, channels: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            channels,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}
