use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use opaseg_core::taxonomy::{GROUP_BACKGROUND, GROUP_COLOURS, GROUP_LUNG};
use opaseg_core::volume::Window;

const LUNG_ALPHA: f64 = 0.25;
const OPACITY_ALPHA: f64 = 0.55;

/// RGB pixels of a windowed CT slice with group labels blended on top.
/// Background and unlabelled pixels are left grey.
pub fn render(hu: &[i16], groups: &[i8], window: Window) -> Vec<u8> {
    let span = (window.high as f64 - window.low as f64).max(1.0);
    let mut rgb = Vec::with_capacity(hu.len() * 3);
    for (&v, &g) in hu.iter().zip(groups) {
        let grey = ((window.clamp(v) as f64 - window.low as f64) / span * 255.0).round();
        let (colour, alpha) = match g {
            GROUP_BACKGROUND => (None, 0.0),
            GROUP_LUNG => (Some(GROUP_COLOURS[1]), LUNG_ALPHA),
            g if (2..=4).contains(&g) => (Some(GROUP_COLOURS[g as usize]), OPACITY_ALPHA),
            _ => (None, 0.0),
        };
        for ch in 0..3 {
            let c = colour.map_or(grey, |c| (1.0 - alpha) * grey + alpha * c[ch] as f64);
            rgb.push(c.round().clamp(0.0, 255.0) as u8);
        }
    }
    rgb
}

pub fn encode_png(rgb: &[u8], height: usize, width: usize) -> Vec<u8> {
    let mut out = Vec::new();
    PngEncoder::new(&mut out)
        .write_image(rgb, width as u32, height as u32, ExtendedColorType::Rgb8)
        .expect("in-memory png");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_stays_grey_and_opacity_is_tinted() {
        let rgb = render(&[-1000, 350, -325], &[0, 0, 2], Window::LUNG);
        assert_eq!(&rgb[..3], &[0, 0, 0]);
        assert_eq!(&rgb[3..6], &[255, 255, 255]);
        let (r, g, b) = (rgb[6], rgb[7], rgb[8]);
        assert!(r > g && r > b);
    }

    #[test]
    fn png_round_trips() {
        let rgb = render(&[0; 12], &[1; 12], Window::LUNG);
        let png = encode_png(&rgb, 3, 4);
        let img = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (4, 3));
        assert_eq!(img.into_raw(), rgb);
    }
}
