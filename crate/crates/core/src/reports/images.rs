//! Binary netpbm output: P5 for one channel, P6 for three.

use std::path::Path;

use super::{write_atomic, ReportError, Result};
use crate::datasets::{ImageGeometry, PIXEL_LAYOUT};
use crate::observables::LocalityMap;

/// 8-bit image with interleaved samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Netpbm {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Netpbm {
    /// File bytes, with optional `#` comment lines after the magic.
    pub fn encode(&self, comments: &[&str]) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n");
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(&format!("{} {}\n255\n", self.width, self.height));
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&self.data);
        bytes
    }

    pub fn decode(bytes: &[u8]) -> Result<Netpbm> {
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => return Err(ReportError::Format("not a P5/P6 image".into())),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            loop {
                match bytes.get(pos) {
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| ReportError::Format("bad netpbm header".into()))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 || !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(ReportError::Format("only 8-bit netpbm is supported".into()));
        }
        let data = bytes[pos + 1..].to_vec();
        if data.len() != width * height * channels {
            return Err(ReportError::Format(format!(
                "{} pixel bytes for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Netpbm {
            width,
            height,
            channels,
            data,
        })
    }

    /// Interleaves values given in the canonical channel-planar order.
    fn from_planar(geom: &ImageGeometry, planar: impl Fn(usize) -> u8) -> Netpbm {
        let plane = geom.plane_size();
        let data = (0..plane)
            .flat_map(|q| (0..geom.channels).map(move |c| c * plane + q))
            .map(planar)
            .collect();
        Netpbm {
            width: geom.width,
            height: geom.height,
            channels: geom.channels,
            data,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, comments: &[&str]) -> Result<()> {
        write_atomic(path.as_ref(), &self.encode(comments))
    }
}

fn check_len(len: usize, geom: &ImageGeometry) -> Result<()> {
    if len != geom.input_size() {
        return Err(ReportError::Geometry(format!(
            "{len} values for a {}x{}x{} image",
            geom.width, geom.height, geom.channels
        )));
    }
    Ok(())
}

fn to_byte(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Binary mask over inputs: 1 becomes 255 in its channel, 0 stays 0.
pub fn mask_image(row: &[bool], geom: &ImageGeometry) -> Result<Netpbm> {
    check_len(row.len(), geom)?;
    Ok(Netpbm::from_planar(geom, |i| if row[i] { 255 } else { 0 }))
}

/// Weights of surviving inputs mapped affinely so that their minimum is 0
/// and their maximum 255; pruned inputs get the image of 0 under the same
/// map. Without spread every pixel is 128.
pub fn weighted_mask_image(values: &[f32], mask: &[bool], geom: &ImageGeometry) -> Result<Netpbm> {
    check_len(values.len(), geom)?;
    check_len(mask.len(), geom)?;
    let alive = values.iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v as f64);
    let (lo, hi) = alive.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if !(hi > lo) {
        return Ok(Netpbm::from_planar(geom, |_| 128));
    }
    let scale = 255.0 / (hi - lo);
    Ok(Netpbm::from_planar(geom, |i| {
        let v = if mask[i] { values[i] as f64 } else { 0.0 };
        to_byte((v - lo) * scale)
    }))
}

/// Non-negative values scaled so that 0 stays 0 and the maximum is 255.
pub fn scaled_image(values: &[f64], geom: &ImageGeometry) -> Result<Netpbm> {
    check_len(values.len(), geom)?;
    let max = values.iter().copied().fold(0.0, f64::max);
    Ok(Netpbm::from_planar(geom, |i| {
        if max > 0.0 {
            to_byte(values[i] / max * 255.0)
        } else {
            0
        }
    }))
}

/// Grayscale `S(d)`: `dx` left to right, `dy` top to bottom, 0 to black
/// and the maximum to white.
pub fn locality_image(map: &LocalityMap) -> Netpbm {
    let max = map.max();
    let data = map
        .grid
        .iter()
        .map(|&v| if max == 0 { 0 } else { to_byte(v as f64 / max as f64 * 255.0) })
        .collect();
    Netpbm {
        width: map.grid.ncols(),
        height: map.grid.nrows(),
        channels: 1,
        data,
    }
}

fn layout_comment() -> String {
    format!("pixel layout {PIXEL_LAYOUT}")
}

pub fn export_mask_image(row: &[bool], geom: &ImageGeometry, path: impl AsRef<Path>) -> Result<()> {
    mask_image(row, geom)?.save(path, &[&layout_comment()])
}

pub fn export_weighted_mask_image(
    values: &[f32],
    mask: &[bool],
    geom: &ImageGeometry,
    path: impl AsRef<Path>,
) -> Result<()> {
    weighted_mask_image(values, mask, geom)?.save(path, &[&layout_comment()])
}

pub fn export_scaled_image(values: &[f64], geom: &ImageGeometry, path: impl AsRef<Path>) -> Result<()> {
    scaled_image(values, geom)?.save(path, &[&layout_comment()])
}

pub fn export_locality_image(map: &LocalityMap, path: impl AsRef<Path>) -> Result<()> {
    let comment = format!(
        "displacement map, layer {}, {:?} channel, dx in [-{w}, {w}], dy in [-{h}, {h}], max {}",
        map.layer,
        map.mode,
        map.max(),
        w = map.width - 1,
        h = map.height - 1,
    );
    locality_image(map).save(path, &[&comment])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::ChannelMode;

    #[test]
    fn white_and_red() {
        let g = ImageGeometry::new(2, 2, 3).unwrap();
        let img = mask_image(&[true; 12], &g).unwrap();
        assert!(img.data.iter().all(|&b| b == 255));
        let mut red = [false; 12];
        red[..4].fill(true);
        let img = mask_image(&red, &g).unwrap();
        for px in img.data.chunks(3) {
            assert_eq!(px, &[255, 0, 0]);
        }
        assert!(mask_image(&[true; 4], &g).is_err());
    }

    #[test]
    fn hand_encoded_payload() {
        let g = ImageGeometry::new(2, 2, 3).unwrap();
        // R plane: (0,0); G plane: (1,0), (1,1); B plane: (0,1)
        let mut m = [false; 12];
        m[0] = true;
        m[4 + 1] = true;
        m[4 + 3] = true;
        m[8 + 2] = true;
        let bytes = mask_image(&m, &g).unwrap().encode(&[]);
        let (head, payload) = bytes.split_at(bytes.len() - 12);
        assert_eq!(head, b"P6\n2 2\n255\n");
        assert_eq!(payload, &[255, 0, 0, 0, 255, 0, 0, 0, 255, 0, 255, 0]);
    }

    #[test]
    fn weighted_cases() {
        let g = ImageGeometry::new(2, 1, 1).unwrap();
        let img = weighted_mask_image(&[-1.0, 1.0], &[true, true], &g).unwrap();
        assert_eq!(img.data, vec![0, 255]);
        let g3 = ImageGeometry::new(4, 1, 1).unwrap();
        let img = weighted_mask_image(&[0.5, 9.0, 0.5, 0.0], &[true, false, true, false], &g3).unwrap();
        assert_eq!(img.data, vec![128; 4]);
        // survivors {-0.5, 0.25, 1.5}; pruned maps to 0.5 / 2 * 255 = 63.75
        let img = weighted_mask_image(&[-0.5, 0.25, 1.5, 7.0], &[true, true, true, false], &g3).unwrap();
        assert_eq!(img.data, vec![0, 96, 255, 64]);
    }

    #[test]
    fn locality_pixels() {
        let mut map = LocalityMap::zeros(3, 2, ChannelMode::Same, 1);
        assert!(locality_image(&map).data.iter().all(|&b| b == 0));
        map.set(1, -1, 7).unwrap();
        let img = locality_image(&map);
        assert_eq!((img.width, img.height), (5, 3));
        assert_eq!(img.data.iter().filter(|&&b| b != 0).count(), 1);
        assert_eq!(img.data[3], 255);
    }

    #[test]
    fn decode_round_trip() {
        let g = ImageGeometry::new(3, 2, 1).unwrap();
        let img = scaled_image(&[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], &g).unwrap();
        assert_eq!(img.data, vec![0, 51, 102, 153, 204, 255]);
        let bytes = img.encode(&["one", "two"]);
        assert_eq!(Netpbm::decode(&bytes).unwrap(), img);
        assert!(Netpbm::decode(b"P3\n1 1\n255\n0").is_err());
    }
}
