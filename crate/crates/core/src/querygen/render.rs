//! Stacked line-chart images of representative series.
//!
//! Each feature gets one subplot: a light band for mean ± std and a dark line
//! for the mean. Rendering is a plain software raster so output bytes only
//! depend on the input values.

use font8x8::UnicodeFonts;
use rayon::prelude::*;
use thiserror::Error;

use crate::dataset::RepresentativeSeries;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RenderError {
    #[error("cannot render onto a {width}x{height} canvas")]
    RenderFailure { width: u32, height: u32 },
    #[error("png encoding failed: {0}")]
    Encode(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RenderStyle {
    pub subplot_width: u32,
    pub subplot_height: u32,
}

impl Default for RenderStyle {
    fn default() -> Self {
        RenderStyle {
            subplot_width: 640,
            subplot_height: 240,
        }
    }
}

const TITLE_SCALE: u32 = 2;
const TITLE_BAND: u32 = 8 * TITLE_SCALE + 8;
const MARGIN: u32 = 10;

const BACKGROUND: [u8; 3] = [255, 255, 255];
const FRAME: [u8; 3] = [170, 170, 170];
const BAND: [u8; 3] = [190, 210, 240];
const LINE: [u8; 3] = [20, 60, 140];
const TEXT: [u8; 3] = [0, 0, 0];

/// Plot area of one subplot in its local pixel frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotArea {
    pub left: f64,
    pub top: f64,
    pub right: f64,
    pub bottom: f64,
}

/// Axis-aligned bounding box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    fn of(points: impl Iterator<Item = (f64, f64)>) -> Option<BBox> {
        points.fold(None, |acc, (x, y)| {
            Some(match acc {
                None => BBox { x0: x, y0: y, x1: x, y1: y },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            })
        })
    }
}

/// Pixel-space geometry of one feature's subplot.
#[derive(Debug, Clone, PartialEq)]
pub struct SubplotGeometry {
    pub area: PlotArea,
    pub line: Vec<(f64, f64)>,
    pub upper: Vec<(f64, f64)>,
    pub lower: Vec<(f64, f64)>,
}

impl SubplotGeometry {
    pub fn line_bbox(&self) -> Option<BBox> {
        BBox::of(self.line.iter().copied())
    }

    pub fn band_bbox(&self) -> Option<BBox> {
        BBox::of(self.upper.iter().chain(&self.lower).copied())
    }
}

/// Maps feature `f` of `rep` into the plot area of a `w x h` subplot.
pub fn subplot_geometry(rep: &RepresentativeSeries, f: usize, w: u32, h: u32) -> SubplotGeometry {
    let area = PlotArea {
        left: MARGIN as f64,
        top: (TITLE_BAND + MARGIN / 2) as f64,
        right: w.saturating_sub(MARGIN + 1) as f64,
        bottom: h.saturating_sub(MARGIN + 1) as f64,
    };
    let mean = rep.feature_mean(f);
    let std = rep.feature_std(f);
    let lo = mean.iter().zip(&std).map(|(m, s)| m - s).fold(f64::INFINITY, f64::min);
    let hi = mean.iter().zip(&std).map(|(m, s)| m + s).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo > 1e-12 {
        let pad = (hi - lo) * 0.05;
        (lo - pad, hi + pad)
    } else {
        let pad = lo.abs().max(1.0) * 0.5;
        (lo - pad, hi + pad)
    };

    let n = mean.len();
    let x_at = |t: usize| {
        if n <= 1 {
            (area.left + area.right) / 2.0
        } else {
            area.left + (area.right - area.left) * t as f64 / (n - 1) as f64
        }
    };
    let y_at = |v: f64| area.bottom - (area.bottom - area.top) * (v - lo) / (hi - lo);

    let line = (0..n).map(|t| (x_at(t), y_at(mean[t]))).collect();
    let upper = (0..n).map(|t| (x_at(t), y_at(mean[t] + std[t]))).collect();
    let lower = (0..n).map(|t| (x_at(t), y_at(mean[t] - std[t]))).collect();
    SubplotGeometry {
        area,
        line,
        upper,
        lower,
    }
}

struct Canvas {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl Canvas {
    fn new(width: u32, height: u32) -> Canvas {
        let mut pixels = Vec::with_capacity((width * height * 3) as usize);
        for _ in 0..width * height {
            pixels.extend_from_slice(&BACKGROUND);
        }
        Canvas {
            width,
            height,
            pixels,
        }
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = ((y as u32 * self.width + x as u32) * 3) as usize;
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    fn vspan(&mut self, x: i64, y0: f64, y1: f64, c: [u8; 3]) {
        let (a, b) = if y0 <= y1 { (y0, y1) } else { (y1, y0) };
        for y in a.round() as i64..=b.round() as i64 {
            self.put(x, y, c);
        }
    }

    fn segment(&mut self, p: (f64, f64), q: (f64, f64), c: [u8; 3]) {
        let steps = ((q.0 - p.0).abs().max((q.1 - p.1).abs()) * 2.0).ceil().max(1.0) as usize;
        for s in 0..=steps {
            let u = s as f64 / steps as f64;
            let x = (p.0 + (q.0 - p.0) * u).round() as i64;
            let y = (p.1 + (q.1 - p.1) * u).round() as i64;
            self.put(x, y, c);
            self.put(x, y + 1, c);
        }
    }

    fn rect_outline(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, c: [u8; 3], dy: i64) {
        let (x0, x1) = (x0.round() as i64, x1.round() as i64);
        let (y0, y1) = (y0.round() as i64 + dy, y1.round() as i64 + dy);
        for x in x0..=x1 {
            self.put(x, y0, c);
            self.put(x, y1, c);
        }
        for y in y0..=y1 {
            self.put(x0, y, c);
            self.put(x1, y, c);
        }
    }

    fn text(&mut self, x: i64, y: i64, s: &str, c: [u8; 3]) {
        let mut cx = x;
        for ch in s.chars() {
            let glyph = font8x8::BASIC_FONTS
                .get(ch)
                .or_else(|| font8x8::BASIC_FONTS.get('?'))
                .unwrap_or([0; 8]);
            for (row, bits) in glyph.iter().enumerate() {
                for col in 0..8 {
                    if bits & (1 << col) != 0 {
                        for sy in 0..TITLE_SCALE as i64 {
                            for sx in 0..TITLE_SCALE as i64 {
                                self.put(
                                    cx + col * TITLE_SCALE as i64 + sx,
                                    y + row as i64 * TITLE_SCALE as i64 + sy,
                                    c,
                                );
                            }
                        }
                    }
                }
            }
            cx += 8 * TITLE_SCALE as i64;
        }
    }
}

fn draw_subplot(canvas: &mut Canvas, rep: &RepresentativeSeries, f: usize, style: RenderStyle) {
    let dy = (f as u32 * style.subplot_height) as i64;
    let g = subplot_geometry(rep, f, style.subplot_width, style.subplot_height);
    let shift = |p: (f64, f64)| (p.0, p.1 + dy as f64);

    let title = format!("{} | feature {}", rep.group_label, f);
    canvas.text(MARGIN as i64, dy + 4, &title, TEXT);
    canvas.rect_outline(g.area.left - 1.0, g.area.top - 1.0, g.area.right + 1.0, g.area.bottom + 1.0, FRAME, dy);

    if g.line.len() == 1 {
        let (x, y) = shift(g.line[0]);
        let (_, yu) = shift(g.upper[0]);
        let (_, yl) = shift(g.lower[0]);
        for ox in -2..=2 {
            canvas.vspan(x.round() as i64 + ox, yu, yl, BAND);
        }
        for ox in -2..=2 {
            for oy in -2..=2 {
                canvas.put(x.round() as i64 + ox, y.round() as i64 + oy, LINE);
            }
        }
        return;
    }

    for w in 0..g.upper.len() - 1 {
        let (u0, u1) = (shift(g.upper[w]), shift(g.upper[w + 1]));
        let (l0, l1) = (shift(g.lower[w]), shift(g.lower[w + 1]));
        let xa = u0.0.round() as i64;
        let xb = u1.0.round() as i64;
        for x in xa..=xb {
            let u = if xb > xa { (x - xa) as f64 / (xb - xa) as f64 } else { 0.0 };
            let yu = u0.1 + (u1.1 - u0.1) * u;
            let yl = l0.1 + (l1.1 - l0.1) * u;
            canvas.vspan(x, yu, yl, BAND);
        }
    }
    for w in 0..g.line.len() - 1 {
        canvas.segment(shift(g.line[w]), shift(g.line[w + 1]), LINE);
    }
}

/// Renders one group to PNG bytes: width `W`, height `H * d`.
pub fn render_group_image(rep: &RepresentativeSeries, style: RenderStyle) -> Result<Vec<u8>, RenderError> {
    let width = style.subplot_width;
    let height = style.subplot_height.saturating_mul(rep.n_features as u32);
    let min_w = 2 * MARGIN + 2;
    let min_h = TITLE_BAND + 2 * MARGIN + 2;
    if width < min_w || style.subplot_height < min_h || height == 0 || rep.seq_length == 0 {
        return Err(RenderError::RenderFailure { width, height });
    }
    let mut canvas = Canvas::new(width, height);
    for f in 0..rep.n_features {
        draw_subplot(&mut canvas, rep, f, style);
    }
    encode_png(&canvas, &rep.group_label)
}

fn encode_png(canvas: &Canvas, title: &str) -> Result<Vec<u8>, RenderError> {
    let enc_err = |e: png::EncodingError| RenderError::Encode(e.to_string());
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, canvas.width, canvas.height);
        encoder.set_color(png::ColorType::Rgb);
        encoder.set_depth(png::BitDepth::Eight);
        encoder
            .add_itxt_chunk("Title".to_string(), title.to_string())
            .map_err(enc_err)?;
        let mut writer = encoder.write_header().map_err(enc_err)?;
        writer.write_image_data(&canvas.pixels).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    Ok(out)
}

/// Renders all groups concurrently; results keep the input order.
pub fn render_all(
    reps: &[RepresentativeSeries],
    style: RenderStyle,
) -> Result<Vec<(String, Vec<u8>)>, RenderError> {
    reps.par_iter()
        .map(|rep| render_group_image(rep, style).map(|png| (rep.group_label.clone(), png)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rep(t: usize, d: usize, std: f64) -> RepresentativeSeries {
        let mean: Vec<f64> = (0..t * d).map(|i| (i as f64 * 0.37).sin()).collect();
        RepresentativeSeries {
            group_label: "walking".into(),
            seq_length: t,
            n_features: d,
            std: vec![std; mean.len()],
            mean,
            support_count: 3,
        }
    }

    fn decode(bytes: &[u8]) -> (png::OutputInfo, Vec<u8>, Option<String>) {
        let decoder = png::Decoder::new(bytes);
        let mut reader = decoder.read_info().unwrap();
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).unwrap();
        let title = reader
            .info()
            .utf8_text
            .iter()
            .find(|c| c.keyword == "Title")
            .map(|c| c.get_text().unwrap());
        (info, buf, title)
    }

    #[test]
    fn two_features_stack_vertically() {
        let style = RenderStyle::default();
        let bytes = render_group_image(&rep(50, 2, 0.2), style).unwrap();
        let (info, _, title) = decode(&bytes);
        assert_eq!((info.width, info.height), (640, 480));
        assert_eq!(title.as_deref(), Some("walking"));
    }

    #[test]
    fn zero_std_band_matches_line() {
        let r = rep(40, 1, 0.0);
        let g = subplot_geometry(&r, 0, 640, 240);
        assert_eq!(g.band_bbox(), g.line_bbox());
        let wide = subplot_geometry(&rep(40, 1, 0.5), 0, 640, 240);
        let (b, l) = (wide.band_bbox().unwrap(), wide.line_bbox().unwrap());
        assert!(b.y1 - b.y0 > l.y1 - l.y0);
    }

    #[test]
    fn deterministic_bytes() {
        let r = rep(30, 3, 0.1);
        let a = render_group_image(&r, RenderStyle::default()).unwrap();
        let b = render_group_image(&r, RenderStyle::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_step_draws_marker() {
        let r = rep(1, 1, 0.0);
        let bytes = render_group_image(&r, RenderStyle::default()).unwrap();
        let (_, pixels, _) = decode(&bytes);
        assert!(pixels.chunks(3).any(|p| p == LINE));
    }

    #[test]
    fn band_and_line_colors_present() {
        let bytes = render_group_image(&rep(64, 1, 0.3), RenderStyle::default()).unwrap();
        let (_, pixels, _) = decode(&bytes);
        assert!(pixels.chunks(3).any(|p| p == BAND));
        assert!(pixels.chunks(3).any(|p| p == LINE));
    }

    #[test]
    fn zero_canvas_fails() {
        let style = RenderStyle {
            subplot_width: 0,
            subplot_height: 240,
        };
        assert!(matches!(
            render_group_image(&rep(5, 1, 0.0), style),
            Err(RenderError::RenderFailure { .. })
        ));
    }

    #[test]
    fn render_all_keeps_order() {
        let mut a = rep(10, 1, 0.0);
        a.group_label = "a".into();
        let mut b = rep(10, 1, 0.0);
        b.group_label = "b".into();
        let out = render_all(&[a, b], RenderStyle::default()).unwrap();
        assert_eq!(out[0].0, "a");
        assert_eq!(out[1].0, "b");
    }
}
