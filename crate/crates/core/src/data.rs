//! IDX dataset ingestion and candidate selection.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{self, Model};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    /// [H, W, C] with values in [0, 1].
    pub x: Tensor,
    pub y: usize,
    /// Index into the raw file this example came from.
    pub source_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<LabeledImage>,
    pub split: String,
}

impl Dataset {
    pub fn new(examples: Vec<LabeledImage>, split: &str) -> Self {
        Dataset {
            examples,
            split: split.to_string(),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Stacks examples into a batched input tensor plus label vector.
    pub fn batch(examples: &[LabeledImage]) -> Result<(Tensor, Vec<usize>)> {
        let tensors: Vec<Tensor> = examples
            .iter()
            .map(|e| {
                let mut shape = vec![1];
                shape.extend_from_slice(&e.x.shape);
                e.x.clone().reshaped(shape)
            })
            .collect::<Result<_>>()?;
        let x = Tensor::stack(&tensors)?;
        let y = examples.iter().map(|e| e.y).collect();
        Ok((x, y))
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.examples.first().map(|e| e.x.shape.as_slice())
    }

    /// FNV-1a over image shape, pixel bits, and labels; identifies the exact
    /// dataset an evaluation report was produced from.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for e in &self.examples {
            for &d in &e.x.shape {
                for b in (d as u64).to_le_bytes() {
                    eat(b);
                }
            }
            for v in &e.x.values {
                for b in v.to_le_bytes() {
                    eat(b);
                }
            }
            for b in (e.y as u64).to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

fn read_u32(cur: &mut Cursor<Vec<u8>>, what: &str) -> Result<u32> {
    let offset = cur.position();
    cur.read_u32::<BigEndian>().map_err(|_| Error::Format {
        offset,
        msg: format!("truncated while reading {what}"),
    })
}

/// Parses the IDX pair: big-endian magics 0x803 (images) and 0x801 (labels),
/// unsigned-byte pixels mapped to [0, 1] via p/255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images_bytes = std::fs::read(images_path)?;
    let labels_bytes = std::fs::read(labels_path)?;

    let mut cur = Cursor::new(images_bytes);
    let magic = read_u32(&mut cur, "images magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"),
        });
    }
    let count = read_u32(&mut cur, "image count")? as usize;
    let rows = read_u32(&mut cur, "rows")? as usize;
    let cols = read_u32(&mut cur, "cols")? as usize;
    let mut pixels = vec![0u8; count * rows * cols];
    let offset = cur.position();
    cur.read_exact(&mut pixels).map_err(|_| Error::Format {
        offset,
        msg: format!("truncated image data: need {} bytes", count * rows * cols),
    })?;

    let mut lcur = Cursor::new(labels_bytes);
    let lmagic = read_u32(&mut lcur, "labels magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad labels magic 0x{lmagic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"),
        });
    }
    let lcount = read_u32(&mut lcur, "label count")? as usize;
    if lcount != count {
        return Err(Error::Format {
            offset: 4,
            msg: format!("label count {lcount} does not match image count {count}"),
        });
    }
    let mut labels = vec![0u8; lcount];
    let offset = lcur.position();
    lcur.read_exact(&mut labels).map_err(|_| Error::Format {
        offset,
        msg: format!("truncated label data: need {lcount} bytes"),
    })?;

    let n = rows * cols;
    let examples = (0..count)
        .map(|i| {
            let values: Vec<f64> = pixels[i * n..(i + 1) * n]
                .iter()
                .map(|&p| p as f64 / 255.0)
                .collect();
            Ok(LabeledImage {
                x: Tensor::new(vec![rows, cols, 1], values)?,
                y: labels[i] as usize,
                source_index: i,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(examples, "unsplit"))
}

/// Writes a dataset back out as an IDX pair (bit-exact format).
pub fn write_idx(data: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    let shape = data
        .image_shape()
        .ok_or_else(|| Error::InvalidInput("cannot write an empty dataset".into()))?;
    let (rows, cols) = (shape[0], shape[1]);

    let mut images = Vec::new();
    images.write_u32::<BigEndian>(IDX_IMAGES_MAGIC)?;
    images.write_u32::<BigEndian>(data.len() as u32)?;
    images.write_u32::<BigEndian>(rows as u32)?;
    images.write_u32::<BigEndian>(cols as u32)?;
    let mut labels = Vec::new();
    labels.write_u32::<BigEndian>(IDX_LABELS_MAGIC)?;
    labels.write_u32::<BigEndian>(data.len() as u32)?;
    for e in &data.examples {
        for &v in &e.x.values {
            images.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
        labels.push(e.y as u8);
    }
    std::fs::write(images_path, images)?;
    std::fs::write(labels_path, labels)?;
    Ok(())
}

/// Loads the four standard MNIST-layout files from a directory.
pub fn load_mnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let mut train = load_idx(
        &dir.join("train-images-idx3-ubyte"),
        &dir.join("train-labels-idx1-ubyte"),
    )?;
    train.split = "train".into();
    let mut test = load_idx(
        &dir.join("t10k-images-idx3-ubyte"),
        &dir.join("t10k-labels-idx1-ubyte"),
    )?;
    test.split = "test".into();
    Ok((train, test))
}

/// Keeps only examples every model classifies correctly, then takes the
/// first `n` in a seed-shuffled order. Attacking inputs a model already
/// gets wrong would not measure anything.
pub fn select_candidates(
    models: &[&Model],
    dataset: &Dataset,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    if n > dataset.len() {
        return Err(Error::NotEnoughCandidates {
            available: dataset.len(),
            requested: n,
        });
    }
    let mut keep = vec![true; dataset.len()];
    for m in models {
        for (chunk_start, chunk) in dataset
            .examples
            .chunks(256)
            .scan(0usize, |s, c| {
                let start = *s;
                *s += c.len();
                Some((start, c))
            })
        {
            let (x, y) = Dataset::batch(chunk)?;
            for (i, (pred, &label)) in m.predict(&x)?.iter().zip(&y).enumerate() {
                if pred.0 != label {
                    keep[chunk_start + i] = false;
                }
            }
        }
    }
    let mut qualifying: Vec<usize> = (0..dataset.len()).filter(|&i| keep[i]).collect();
    if qualifying.len() < n {
        return Err(Error::NotEnoughCandidates {
            available: qualifying.len(),
            requested: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    model::shuffle(&mut qualifying, &mut rng);
    qualifying.truncate(n);
    let examples = qualifying
        .into_iter()
        .map(|i| dataset.examples[i].clone())
        .collect();
    Ok(Dataset::new(examples, "candidates"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, Arch, ModelSpec};
    use std::io::Write;

    fn tmp(name: &str, bytes: &[u8]) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("advbench-data-{}-{name}", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(bytes).unwrap();
        path
    }

    fn idx_pair(count: u32, rows: u32, cols: u32, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut img = Vec::new();
        img.write_u32::<BigEndian>(IDX_IMAGES_MAGIC).unwrap();
        img.write_u32::<BigEndian>(count).unwrap();
        img.write_u32::<BigEndian>(rows).unwrap();
        img.write_u32::<BigEndian>(cols).unwrap();
        img.extend_from_slice(pixels);
        let mut lab = Vec::new();
        lab.write_u32::<BigEndian>(IDX_LABELS_MAGIC).unwrap();
        lab.write_u32::<BigEndian>(labels.len() as u32).unwrap();
        lab.extend_from_slice(labels);
        (img, lab)
    }

    #[test]
    fn pixel_mapping_endpoints() {
        let (img, lab) = idx_pair(1, 2, 2, &[0, 255, 128, 64], &[3]);
        let d = load_idx(&tmp("a-img", &img), &tmp("a-lab", &lab)).unwrap();
        let v = &d.examples[0].x.values;
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
        assert!((v[2] - 128.0 / 255.0).abs() < 1e-12);
        assert_eq!(d.examples[0].y, 3);
    }

    #[test]
    fn count_mismatch_is_format_error() {
        let (img, lab) = idx_pair(2, 1, 1, &[0, 0], &[1]);
        // label header says 1, image header says 2
        let err = load_idx(&tmp("b-img", &img), &tmp("b-lab", &lab)).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn wrong_magic_is_format_error() {
        let (mut img, lab) = idx_pair(1, 1, 1, &[0], &[0]);
        img[3] = 0x99;
        let err = load_idx(&tmp("c-img", &img), &tmp("c-lab", &lab)).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn truncated_pixels_is_format_error_with_offset() {
        let (mut img, lab) = idx_pair(2, 2, 2, &[0; 8], &[0, 1]);
        img.truncate(img.len() - 3);
        let err = load_idx(&tmp("d-img", &img), &tmp("d-lab", &lab)).unwrap_err();
        match err {
            Error::Format { offset, .. } => assert_eq!(offset, 16),
            other => panic!("expected format error, got {other}"),
        }
    }

    #[test]
    fn idx_round_trip() {
        let (img, lab) = idx_pair(3, 2, 2, &[0, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100, 110], &[0, 1, 2]);
        let d = load_idx(&tmp("e-img", &img), &tmp("e-lab", &lab)).unwrap();
        let ip = std::env::temp_dir().join("advbench-data-rt-img");
        let lp = std::env::temp_dir().join("advbench-data-rt-lab");
        write_idx(&d, &ip, &lp).unwrap();
        let d2 = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.examples, d2.examples);
    }

    #[test]
    fn empty_filter_passes_everything() {
        let (img, lab) = idx_pair(4, 2, 2, &[0; 16], &[0, 1, 0, 1]);
        let d = load_idx(&tmp("f-img", &img), &tmp("f-lab", &lab)).unwrap();
        let sel = select_candidates(&[], &d, 3, 1).unwrap();
        assert_eq!(sel.len(), 3);
    }

    #[test]
    fn hopeless_filter_reports_achievable_count() {
        // Untrained model on all-zero images predicts one fixed class; give
        // every example a different label so nothing qualifies.
        let (img, lab) = idx_pair(4, 4, 4, &[0; 64], &[0, 1, 2, 3]);
        let d = load_idx(&tmp("g-img", &img), &tmp("g-lab", &lab)).unwrap();
        let m = build(&ModelSpec::new(Arch::MlpA, [4, 4, 1], 4), 1).unwrap();
        let err = select_candidates(&[&m], &d, 4, 1).unwrap_err();
        match err {
            Error::NotEnoughCandidates { available, requested } => {
                assert!(available < 4);
                assert_eq!(requested, 4);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn candidates_are_correctly_classified_and_order_invariant() {
        let (img, lab) = idx_pair(
            6,
            4,
            4,
            &(0..96).map(|i| (i * 37 % 256) as u8).collect::<Vec<_>>(),
            &[0, 1, 0, 1, 0, 1],
        );
        let d = load_idx(&tmp("h-img", &img), &tmp("h-lab", &lab)).unwrap();
        let m1 = build(&ModelSpec::new(Arch::MlpA, [4, 4, 1], 2), 1).unwrap();
        let m2 = build(&ModelSpec::new(Arch::MlpA, [4, 4, 1], 2), 2).unwrap();
        let a = select_candidates(&[&m1, &m2], &d, 1, 5);
        let b = select_candidates(&[&m2, &m1], &d, 1, 5);
        match (a, b) {
            (Ok(a), Ok(b)) => {
                assert_eq!(a, b);
                for e in &a.examples {
                    let (x, _) = Dataset::batch(std::slice::from_ref(e)).unwrap();
                    assert_eq!(m1.predict(&x).unwrap()[0].0, e.y);
                    assert_eq!(m2.predict(&x).unwrap()[0].0, e.y);
                }
            }
            (Err(Error::NotEnoughCandidates { .. }), Err(Error::NotEnoughCandidates { .. })) => {}
            other => panic!("filter order changed the outcome: {other:?}"),
        }
    }
}
