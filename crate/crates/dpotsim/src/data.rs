//! Dataset construction: a synthetic image-classification generator for
//! desk-scale runs, an IDX reader/writer for MNIST-family files, and the
//! biased non-IID client partitioner.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// One grayscale image with its class label. Pixels live in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub label: usize,
}

/// An ordered, immutable-by-convention collection of same-shape examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub examples: Vec<Example>,
    pub n_classes: usize,
    pub image_shape: (usize, usize),
}

impl Dataset {
    pub fn new(
        examples: Vec<Example>,
        n_classes: usize,
        image_shape: (usize, usize),
    ) -> Result<Self> {
        for (i, ex) in examples.iter().enumerate() {
            if ex.image.shape() != [image_shape.0, image_shape.1] {
                return Err(Error::shape(format!(
                    "example {i} has shape {:?}, dataset wants {:?}",
                    ex.image.shape(),
                    image_shape
                )));
            }
            if ex.label >= n_classes {
                return Err(Error::config(format!(
                    "example {i} label {} >= n_classes {n_classes}",
                    ex.label
                )));
            }
        }
        Ok(Dataset {
            examples,
            n_classes,
            image_shape,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn pixels(&self) -> usize {
        self.image_shape.0 * self.image_shape.1
    }

    /// Stacks all images into a `[N × H·W]` batch tensor.
    pub fn as_batch(&self) -> Tensor {
        let px = self.pixels();
        let mut data = Vec::with_capacity(self.len() * px);
        for ex in &self.examples {
            data.extend_from_slice(ex.image.data());
        }
        Tensor::new(vec![self.len(), px], data).expect("batch shape")
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }

    /// Splits off the last `per_class_test` examples of every class into a
    /// test set, preserving order within each part.
    pub fn split_per_class(&self, per_class_test: usize) -> Result<(Dataset, Dataset)> {
        let mut test_marks = vec![false; self.len()];
        for c in 0..self.n_classes {
            let idxs: Vec<usize> = (0..self.len())
                .filter(|&i| self.examples[i].label == c)
                .collect();
            if idxs.len() < per_class_test {
                return Err(Error::config(format!(
                    "class {c} has {} examples, cannot hold out {per_class_test}",
                    idxs.len()
                )));
            }
            for &i in &idxs[idxs.len() - per_class_test..] {
                test_marks[i] = true;
            }
        }
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for (i, ex) in self.examples.iter().enumerate() {
            if test_marks[i] {
                test.push(ex.clone());
            } else {
                train.push(ex.clone());
            }
        }
        Ok((
            Dataset::new(train, self.n_classes, self.image_shape)?,
            Dataset::new(test, self.n_classes, self.image_shape)?,
        ))
    }
}

/// Deterministic synthetic classification data: one seeded template image
/// per class, plus Gaussian pixel noise clamped to `[0,1]`. Examples are
/// emitted class-major (all of class 0 first).
pub fn generate_synthetic(
    n_classes: usize,
    per_class: usize,
    image_shape: (usize, usize),
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes == 0 || per_class == 0 {
        return Err(Error::config("need at least one class and one example"));
    }
    if noise_sigma < 0.0 {
        return Err(Error::config(format!("noise_sigma {noise_sigma} < 0")));
    }
    let px = image_shape.0 * image_shape.1;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| (0..px).map(|_| rng.random_range(0.0..1.0)).collect())
        .collect();
    let normal = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma checked");
    let mut examples = Vec::with_capacity(n_classes * per_class);
    for (label, template) in templates.iter().enumerate() {
        for _ in 0..per_class {
            let data: Vec<f64> = template
                .iter()
                .map(|&t| {
                    let noisy = if noise_sigma == 0.0 {
                        t
                    } else {
                        t + normal.sample(&mut rng)
                    };
                    noisy.clamp(0.0, 1.0)
                })
                .collect();
            examples.push(Example {
                image: Tensor::new(vec![image_shape.0, image_shape.1], data)?,
                label,
            });
        }
    }
    Dataset::new(examples, n_classes, image_shape)
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_be_bytes(buf))
}

/// Reads a decompressed IDX image/label file pair. Pixel bytes are scaled to
/// `[0,1]` by division with 255.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let mut imgf = std::fs::File::open(images_path)?;
    let magic = read_u32_be(&mut imgf)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "images magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let n = read_u32_be(&mut imgf)? as usize;
    let rows = read_u32_be(&mut imgf)? as usize;
    let cols = read_u32_be(&mut imgf)? as usize;
    let mut pixels = vec![0u8; n * rows * cols];
    imgf.read_exact(&mut pixels)?;

    let mut lblf = std::fs::File::open(labels_path)?;
    let magic = read_u32_be(&mut lblf)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "labels magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n_labels = read_u32_be(&mut lblf)? as usize;
    if n_labels != n {
        return Err(Error::Consistency(format!(
            "{n} images but {n_labels} labels"
        )));
    }
    let mut labels = vec![0u8; n];
    lblf.read_exact(&mut labels)?;

    let n_classes = labels.iter().map(|&l| l as usize + 1).max().unwrap_or(1);
    let examples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| {
            let data: Vec<f64> = pixels[i * rows * cols..(i + 1) * rows * cols]
                .iter()
                .map(|&b| b as f64 / 255.0)
                .collect();
            Ok(Example {
                image: Tensor::new(vec![rows, cols], data)?,
                label: label as usize,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(examples, n_classes, (rows, cols))
}

/// Writes the dataset as a raw IDX file pair, quantizing pixels to bytes by
/// `round(v*255)`.
pub fn save_idx(dataset: &Dataset, images_path: &Path, labels_path: &Path) -> Result<()> {
    if dataset.n_classes > 256 {
        return Err(Error::config("IDX labels are single bytes"));
    }
    let (rows, cols) = dataset.image_shape;
    let mut imgf = std::fs::File::create(images_path)?;
    imgf.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    imgf.write_all(&(dataset.len() as u32).to_be_bytes())?;
    imgf.write_all(&(rows as u32).to_be_bytes())?;
    imgf.write_all(&(cols as u32).to_be_bytes())?;
    let mut buf = Vec::with_capacity(dataset.len() * rows * cols);
    for ex in &dataset.examples {
        buf.extend(
            ex.image
                .data()
                .iter()
                .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8),
        );
    }
    imgf.write_all(&buf)?;

    let mut lblf = std::fs::File::create(labels_path)?;
    lblf.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lblf.write_all(&(dataset.len() as u32).to_be_bytes())?;
    let labels: Vec<u8> = dataset.examples.iter().map(|e| e.label as u8).collect();
    lblf.write_all(&labels)?;
    Ok(())
}

/// Parameters of the biased class-group partition.
#[derive(Debug, Clone, Copy)]
pub struct PartitionSpec {
    pub n_clients: usize,
    /// Probability that a class-`c` example lands in group `c`; the rest is
    /// split evenly over the other groups. Must lie in `[1/C, 1]`.
    pub bias: f64,
    pub seed: u64,
}

/// Splits a dataset over clients with a per-class home-group bias.
///
/// Clients are assigned to `C` groups round-robin (client `i` to group
/// `i % C`). An example of class `c` goes to group `c` with probability
/// `bias` and to each other group with probability `(1-bias)/(C-1)`; inside
/// a group the receiving client is uniform. Groups with no clients (possible
/// when `n_clients < C`) get their probability mass redistributed
/// proportionally over the populated groups.
pub fn partition_noniid(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    if dataset.is_empty() {
        return Err(Error::config("cannot partition an empty dataset"));
    }
    if spec.n_clients == 0 {
        return Err(Error::config("need at least one client"));
    }
    let c = dataset.n_classes;
    let lo = 1.0 / c as f64;
    if !(lo..=1.0).contains(&spec.bias) {
        return Err(Error::config(format!(
            "bias {} outside [1/{c}, 1]",
            spec.bias
        )));
    }

    let mut group_members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for client in 0..spec.n_clients {
        group_members[client % c].push(client);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut per_client: Vec<Vec<Example>> = vec![Vec::new(); spec.n_clients];
    for ex in &dataset.examples {
        let mut weights: Vec<f64> = (0..c)
            .map(|g| {
                if group_members[g].is_empty() {
                    0.0
                } else if g == ex.label {
                    spec.bias
                } else {
                    (1.0 - spec.bias) / (c as f64 - 1.0)
                }
            })
            .collect();
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            // Home group empty and bias 1: fall back to uniform over
            // populated groups.
            for (g, w) in weights.iter_mut().enumerate() {
                *w = if group_members[g].is_empty() { 0.0 } else { 1.0 };
            }
        }
        let total: f64 = weights.iter().sum();
        let mut u = rng.random_range(0.0..total);
        let mut group = c - 1;
        for (g, w) in weights.iter().enumerate() {
            if u < *w {
                group = g;
                break;
            }
            u -= w;
        }
        let members = &group_members[group];
        let client = members[rng.random_range(0..members.len())];
        per_client[client].push(ex.clone());
    }

    per_client
        .into_iter()
        .map(|examples| Dataset::new(examples, c, dataset.image_shape))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_noise_reproduces_templates() {
        let ds = generate_synthetic(3, 4, (4, 4), 0.0, 9).unwrap();
        for c in 0..3 {
            let base = &ds.examples[c * 4].image;
            for i in 0..4 {
                assert_eq!(&ds.examples[c * 4 + i].image, base);
                assert_eq!(ds.examples[c * 4 + i].label, c);
            }
        }
    }

    #[test]
    fn synthetic_counts_and_labels() {
        let ds = generate_synthetic(10, 100, (16, 16), 0.15, 1).unwrap();
        assert_eq!(ds.len(), 1000);
        for c in 0..10 {
            assert_eq!(ds.examples.iter().filter(|e| e.label == c).count(), 100);
        }
        assert!(ds
            .examples
            .iter()
            .all(|e| e.image.data().iter().all(|v| (0.0..=1.0).contains(v))));
    }

    #[test]
    fn synthetic_rejects_negative_sigma() {
        assert!(matches!(
            generate_synthetic(2, 2, (2, 2), -0.1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = generate_synthetic(5, 10, (8, 8), 0.2, 77).unwrap();
        let b = generate_synthetic(5, 10, (8, 8), 0.2, 77).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn split_per_class_holds_out_balanced_test() {
        let ds = generate_synthetic(4, 10, (3, 3), 0.1, 2).unwrap();
        let (train, test) = ds.split_per_class(3).unwrap();
        assert_eq!(train.len(), 28);
        assert_eq!(test.len(), 12);
        for c in 0..4 {
            assert_eq!(test.examples.iter().filter(|e| e.label == c).count(), 3);
        }
    }

    fn temp_dir(tag: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("dpotsim-data-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn idx_round_trip_is_byte_exact() {
        let dir = temp_dir("rt");
        let ds = generate_synthetic(3, 5, (6, 7), 0.3, 4).unwrap();
        let (imgs, lbls) = (dir.join("im"), dir.join("lb"));
        save_idx(&ds, &imgs, &lbls).unwrap();
        let loaded = load_idx(&imgs, &lbls).unwrap();
        assert_eq!(loaded.len(), 15);
        assert_eq!(loaded.image_shape, (6, 7));
        let (imgs2, lbls2) = (dir.join("im2"), dir.join("lb2"));
        save_idx(&loaded, &imgs2, &lbls2).unwrap();
        assert_eq!(std::fs::read(&imgs).unwrap(), std::fs::read(&imgs2).unwrap());
        assert_eq!(std::fs::read(&lbls).unwrap(), std::fs::read(&lbls2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_scaling_endpoints() {
        let dir = temp_dir("scale");
        let ex = |v: f64| Example {
            image: Tensor::new(vec![1, 1], vec![v]).unwrap(),
            label: 0,
        };
        let ds = Dataset::new(vec![ex(0.0), ex(1.0)], 1, (1, 1)).unwrap();
        let (imgs, lbls) = (dir.join("im"), dir.join("lb"));
        save_idx(&ds, &imgs, &lbls).unwrap();
        let loaded = load_idx(&imgs, &lbls).unwrap();
        assert_eq!(loaded.examples[0].image.data()[0], 0.0);
        assert_eq!(loaded.examples[1].image.data()[0], 1.0);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_wrong_magic_is_format_error() {
        let dir = temp_dir("magic");
        let imgs = dir.join("im");
        let lbls = dir.join("lb");
        // Labels magic in the images slot.
        let mut buf = Vec::new();
        buf.extend(0x0000_0801u32.to_be_bytes());
        buf.extend(1u32.to_be_bytes());
        buf.extend(1u32.to_be_bytes());
        buf.extend(1u32.to_be_bytes());
        buf.push(0);
        std::fs::write(&imgs, &buf).unwrap();
        std::fs::write(&lbls, []).unwrap();
        assert!(matches!(load_idx(&imgs, &lbls), Err(Error::Format(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_count_mismatch_is_consistency_error() {
        let dir = temp_dir("count");
        let ds = generate_synthetic(2, 3, (2, 2), 0.0, 0).unwrap();
        let (imgs, lbls) = (dir.join("im"), dir.join("lb"));
        save_idx(&ds, &imgs, &lbls).unwrap();
        // Rewrite the labels file claiming a different count.
        let mut lbl_bytes = std::fs::read(&lbls).unwrap();
        lbl_bytes[4..8].copy_from_slice(&5u32.to_be_bytes());
        lbl_bytes.pop();
        std::fs::write(&lbls, &lbl_bytes).unwrap();
        assert!(matches!(
            load_idx(&imgs, &lbls),
            Err(Error::Consistency(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn idx_truncated_is_io_error() {
        let dir = temp_dir("trunc");
        let ds = generate_synthetic(2, 3, (4, 4), 0.0, 0).unwrap();
        let (imgs, lbls) = (dir.join("im"), dir.join("lb"));
        save_idx(&ds, &imgs, &lbls).unwrap();
        let bytes = std::fs::read(&imgs).unwrap();
        std::fs::write(&imgs, &bytes[..bytes.len() - 7]).unwrap();
        assert!(matches!(load_idx(&imgs, &lbls), Err(Error::Io(_))));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn partition_bias_one_confines_classes_to_home_groups() {
        let ds = generate_synthetic(4, 25, (2, 2), 0.1, 3).unwrap();
        let spec = PartitionSpec {
            n_clients: 8,
            bias: 1.0,
            seed: 5,
        };
        let parts = partition_noniid(&ds, &spec).unwrap();
        for (client, part) in parts.iter().enumerate() {
            let group = client % 4;
            assert!(part.examples.iter().all(|e| e.label == group));
        }
    }

    #[test]
    fn partition_conserves_examples() {
        let ds = generate_synthetic(5, 30, (3, 3), 0.2, 8).unwrap();
        let spec = PartitionSpec {
            n_clients: 7,
            bias: 0.5,
            seed: 12,
        };
        let parts = partition_noniid(&ds, &spec).unwrap();
        let total: usize = parts.iter().map(|p| p.len()).sum();
        assert_eq!(total, ds.len());
        // Multiset equality via sorted label+pixel fingerprints.
        let fp = |ex: &Example| {
            let mut v = ex.image.data().to_vec();
            v.push(ex.label as f64);
            v.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        let mut src: Vec<_> = ds.examples.iter().map(fp).collect();
        let mut dst: Vec<_> = parts
            .iter()
            .flat_map(|p| p.examples.iter().map(fp))
            .collect();
        src.sort();
        dst.sort();
        assert_eq!(src, dst);
    }

    #[test]
    fn partition_is_seed_deterministic() {
        let ds = generate_synthetic(3, 20, (2, 2), 0.2, 1).unwrap();
        let spec = PartitionSpec {
            n_clients: 6,
            bias: 0.6,
            seed: 42,
        };
        assert_eq!(
            partition_noniid(&ds, &spec).unwrap(),
            partition_noniid(&ds, &spec).unwrap()
        );
    }

    #[test]
    fn partition_uniform_bias_passes_chi_square() {
        // bias = 1/C makes the group distribution uniform. Sum of the
        // per-seed chi-square statistics over 10 seeds ~ chi2(df=90);
        // the p=0.01 critical value is 124.116.
        let c = 10;
        let ds = generate_synthetic(c, 100, (2, 2), 0.1, 6).unwrap();
        let mut stat_sum = 0.0;
        for seed in 0..10u64 {
            let spec = PartitionSpec {
                n_clients: c,
                bias: 1.0 / c as f64,
                seed,
            };
            let parts = partition_noniid(&ds, &spec).unwrap();
            // One client per group here, so group counts = client counts.
            let expected = ds.len() as f64 / c as f64;
            let stat: f64 = parts
                .iter()
                .map(|p| {
                    let d = p.len() as f64 - expected;
                    d * d / expected
                })
                .sum();
            stat_sum += stat;
        }
        assert!(
            stat_sum < 124.116,
            "chi-square sum {stat_sum} rejects uniformity"
        );
    }

    #[test]
    fn partition_rejects_empty_dataset() {
        let ds = Dataset::new(Vec::new(), 3, (2, 2)).unwrap();
        let spec = PartitionSpec {
            n_clients: 3,
            bias: 0.5,
            seed: 0,
        };
        assert!(matches!(
            partition_noniid(&ds, &spec),
            Err(Error::Config(_))
        ));
    }

    proptest! {
        #[test]
        fn partition_conservation_property(
            n_clients in 1usize..12,
            seed in 0u64..1000,
            bias_steps in 0u32..10,
        ) {
            let c = 4;
            let bias = 1.0 / c as f64 + (bias_steps as f64 / 10.0) * (1.0 - 1.0 / c as f64);
            let ds = generate_synthetic(c, 8, (2, 2), 0.1, 99).unwrap();
            let spec = PartitionSpec { n_clients, bias, seed };
            let parts = partition_noniid(&ds, &spec).unwrap();
            let total: usize = parts.iter().map(|p| p.len()).sum();
            prop_assert_eq!(total, ds.len());
            prop_assert_eq!(parts.len(), n_clients);
        }
    }
}
