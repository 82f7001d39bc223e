use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::Tensor;

/// One written image and the value range mapped onto 0..=255.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpedImage {
    pub path: PathBuf,
    pub min: f32,
    pub max: f32,
    /// Stage absent from the model; written as zeros.
    pub absent: bool,
}

/// File stem, the stage (`None` if absent) and a tensor giving its shape.
type Stage<'a> = (String, Option<&'a Tensor<f32>>, &'a Tensor<f32>);

const HEAD_STAGES: [&str; 6] = [
    "input",
    "x_product",
    "row_softmax",
    "y_product",
    "col_softmax",
    "relevance",
];
const LAYER_STAGES: [&str; 5] = ["before_conv", "after_conv", "before_norm", "after_norm", "output"];

/// Writes a binary PGM (`channels == 1`) or PPM (`channels == 3`).
/// `pixels` is row-major, interleaved for PPM.
pub fn write_pnm(path: &Path, width: usize, height: usize, channels: usize, pixels: &[u8]) -> Result<()> {
    let magic = match channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::invalid("write_pnm", format!("{c} channels"))),
    };
    if pixels.len() != width * height * channels {
        return Err(Error::invalid(
            "write_pnm",
            format!("{} bytes for {width}x{height}x{channels}", pixels.len()),
        ));
    }
    let mut bytes = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes every stage of a forward pass on a single image: the six stages of
/// the first head, then five stages per layer. Multi-channel stages are laid
/// out left to right in groups of the model's input channel count.
pub fn dump_activations(
    model: &mut Model<f32>,
    image: &Tensor<f32>,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<DumpedImage>> {
    let out_dir = out_dir.as_ref();
    if image.shape().first() != Some(&1) {
        return Err(Error::invalid(
            "dump_activations",
            format!("expected one image, got {:?}", image.shape()),
        ));
    }
    let trace = model.forward_traced(image)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let base = model.spec().input[0];
    let ext = if base == 3 { "ppm" } else { "pgm" };

    let h = &trace.first_head;
    let mut stages: Vec<Stage> = Vec::new();
    for (k, (name, t)) in HEAD_STAGES
        .iter()
        .zip([
            &h.input,
            &h.x_product,
            &h.row_softmax,
            &h.y_product,
            &h.col_softmax,
            &h.relevance,
        ])
        .enumerate()
    {
        stages.push((format!("head0_{k}_{name}"), Some(t), t));
    }
    for (i, l) in trace.layers.iter().enumerate() {
        let present = [
            Some(&l.before_conv),
            Some(&l.after_conv),
            Some(&l.before_norm),
            l.after_norm.as_ref(),
            Some(&l.output),
        ];
        for (k, (name, t)) in LAYER_STAGES.iter().zip(present).enumerate() {
            stages.push((format!("layer{i}_{}_{name}", k + 1), t, t.unwrap_or(&l.before_norm)));
        }
    }

    let mut written = Vec::with_capacity(stages.len());
    let mut sidecar = String::from("# file min max\n");
    for (stem, tensor, shape_of) in stages {
        let path = out_dir.join(format!("{stem}.{ext}"));
        let shape = shape_of.shape();
        let (c, height, width) = (shape[1], shape[2], shape[3]);
        let values = match tensor {
            Some(t) => t.to_vec(),
            None => vec![0.0; c * height * width],
        };
        let (min, max, bytes) = scale_to_bytes(&values);
        let (tile_w, channels, pixels) = layout(&bytes, c, height, width, base);
        write_pnm(&path, tile_w, height, channels, &pixels)?;
        let _ = writeln!(
            sidecar,
            "{} {min:e} {max:e}",
            path.file_name().unwrap_or_default().to_string_lossy()
        );
        written.push(DumpedImage {
            path,
            min,
            max,
            absent: tensor.is_none(),
        });
    }
    let scales = out_dir.join("scales.txt");
    fs::write(&scales, sidecar).map_err(|e| Error::io(&scales, e))?;
    Ok(written)
}

/// Min-max scales finite values to bytes. Constant and non-finite values map to 0.
fn scale_to_bytes(values: &[f32]) -> (f32, f32, Vec<u8>) {
    let finite = values.iter().copied().filter(|v| v.is_finite());
    let min = finite.clone().fold(f32::INFINITY, f32::min);
    let max = finite.fold(f32::NEG_INFINITY, f32::max);
    if min >= max {
        let m = if min.is_finite() { min } else { 0.0 };
        return (m, if max.is_finite() { max } else { 0.0 }, vec![0; values.len()]);
    }
    let range = max - min;
    let bytes = values
        .iter()
        .map(|v| {
            if v.is_finite() {
                ((v - min) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    (min, max, bytes)
}

/// Planar `(c, h, w)` bytes to a row-major image: RGB triples side by side
/// when `base == 3`, otherwise every channel as its own grayscale tile.
fn layout(bytes: &[u8], c: usize, h: usize, w: usize, base: usize) -> (usize, usize, Vec<u8>) {
    let plane = h * w;
    if base == 3 && c.is_multiple_of(3) {
        let groups = c / 3;
        let mut out = Vec::with_capacity(bytes.len());
        for y in 0..h {
            for g in 0..groups {
                for x in 0..w {
                    for ch in 0..3 {
                        out.push(bytes[(g * 3 + ch) * plane + y * w + x]);
                    }
                }
            }
        }
        (groups * w, 3, out)
    } else {
        let mut out = Vec::with_capacity(bytes.len());
        for y in 0..h {
            for ch in 0..c {
                out.extend_from_slice(&bytes[ch * plane + y * w..ch * plane + (y + 1) * w]);
            }
        }
        (c * w, 1, out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelSpec;
    use crate::optim::{init_params, InitConfig};

    fn pnm_payload(path: &Path) -> (String, Vec<u8>) {
        let bytes = fs::read(path).unwrap();
        let mut newlines = 0;
        let split = bytes
            .iter()
            .position(|b| {
                newlines += (*b == b'\n') as usize;
                newlines == 3
            })
            .unwrap();
        (
            String::from_utf8(bytes[..split].to_vec()).unwrap(),
            bytes[split + 1..].to_vec(),
        )
    }

    #[test]
    fn file_count_and_absent_norm() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::<f32>::build(&ModelSpec::attention([1, 6, 5], 2, 3, false)).unwrap();
        init_params(&mut model, &InitConfig::new(3)).unwrap();
        let img = Tensor::new(&[1, 1, 6, 5], (0..30).map(|v| v as f32 / 29.0).collect()).unwrap();
        let files = dump_activations(&mut model, &img, dir.path()).unwrap();
        assert_eq!(files.len(), 2 * 5 + 6);
        for f in &files {
            let (header, payload) = pnm_payload(&f.path);
            assert!(header.starts_with("P5\n"));
            let dims: Vec<usize> = header
                .lines()
                .nth(1)
                .unwrap()
                .split(' ')
                .map(|d| d.parse().unwrap())
                .collect();
            assert_eq!(dims[0] * dims[1], payload.len());
            if f.absent {
                assert!(payload.iter().all(|b| *b == 0));
            }
        }
        assert_eq!(files.iter().filter(|f| f.absent).count(), 2);
        let (header, _) = pnm_payload(&files[6].path);
        assert_eq!(header, "P5\n15 6\n255");
        assert!(dir.path().join("scales.txt").is_file());
    }

    #[test]
    fn zero_weight_relevance_is_constant() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::<f32>::build(&ModelSpec::attention([1, 4, 4], 1, 1, true)).unwrap();
        let img = Tensor::new(&[1, 1, 4, 4], (0..16).map(|v| v as f32 / 15.0).collect()).unwrap();
        let files = dump_activations(&mut model, &img, dir.path()).unwrap();
        let relevance = &files[5];
        assert!(relevance.path.ends_with("head0_5_relevance.pgm"));
        assert_eq!(relevance.min, relevance.max);
        assert!(!files.iter().any(|f| f.absent));
    }

    #[test]
    fn color_models_write_ppm() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = Model::<f32>::build(&ModelSpec::attention([3, 4, 4], 1, 2, false)).unwrap();
        init_params(&mut model, &InitConfig::new(1)).unwrap();
        let img = Tensor::new(&[1, 3, 4, 4], (0..48).map(|v| v as f32 / 47.0).collect()).unwrap();
        let files = dump_activations(&mut model, &img, dir.path()).unwrap();
        let (header, payload) = pnm_payload(&files[6].path);
        assert_eq!(header, "P6\n8 4\n255");
        assert_eq!(payload.len(), 8 * 4 * 3);
    }

    #[test]
    fn scaling_is_min_max() {
        let (min, max, b) = scale_to_bytes(&[1.0, 3.0, 2.0, f32::NAN]);
        assert_eq!((min, max), (1.0, 3.0));
        assert_eq!(b, vec![0, 255, 128, 0]);
        assert_eq!(scale_to_bytes(&[2.0, 2.0]).2, vec![0, 0]);
    }
}
