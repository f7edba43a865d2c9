//! Gradient attention maps: the channel-wise maximum of the absolute gradient
//! of the probability gap `T_GAM` with respect to the input pixels.

use std::collections::BTreeMap;
use std::path::Path;

use crate::autodiff::Targets;
use crate::error::{Error, Result};
use crate::models::{forward, Recognizer};
use crate::tensor::{Scalar, Tensor};

/// Mean gap between the largest probability and every probability,
/// `sum_i (P_max - P_i) / N`.
pub fn compute_t_gam<T: Scalar>(probs: &[T]) -> Result<T> {
    const OP: &str = "compute_t_gam";
    if probs.len() < 2 {
        return Err(Error::invalid(
            OP,
            format!("need at least 2 classes, got {}", probs.len()),
        ));
    }
    let total: f64 = probs.iter().map(|p| p.as_f64()).sum();
    if (total - 1.0).abs() > 1e-5 || probs.iter().any(|p| !p.is_finite() || *p < T::zero()) {
        return Err(Error::invalid(
            OP,
            format!("probabilities must be non-negative and sum to 1, sum is {total}"),
        ));
    }
    let pmax = probs.iter().copied().fold(T::neg_infinity(), T::max);
    let gap: T = probs.iter().map(|&p| pmax - p).sum();
    Ok(gap / T::of(probs.len() as f64))
}

/// A single-channel attention map stored as `[1, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GamMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> GamMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if values.iter().any(|v| !(*v >= T::zero())) {
            return Err(Error::invalid("gam", "attention values must be non-negative"));
        }
        Ok(Self {
            values: Tensor::new(vec![1, height, width], values)?,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Tensor::zeros(vec![1, height, width]),
        }
    }

    pub fn height(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &[T] {
        self.values.data()
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn at(&self, row: usize, col: usize) -> T {
        self.values.data()[row * self.width() + col]
    }

    pub fn max(&self) -> T {
        self.values.max_value().unwrap_or_else(T::zero)
    }

    /// Rescales so the largest value is 1; an all-zero map is returned as is.
    pub fn normalized(&self) -> Self {
        let m = self.max();
        if m > T::zero() {
            Self {
                values: self.values.map(|v| v / m),
            }
        } else {
            self.clone()
        }
    }

    /// Number of pixels strictly above `fraction * max`.
    pub fn support(&self, fraction: f64) -> usize {
        let cut = self.max() * T::of(fraction);
        self.values().iter().filter(|&&v| v > cut).count()
    }

    /// 8-bit binary PGM (P5) of the max-normalized map.
    pub fn to_pgm(&self) -> Vec<u8> {
        let norm = self.normalized();
        let mut out = format!("P5\n{} {}\n255\n", self.width(), self.height()).into_bytes();
        out.extend(
            norm.values()
                .iter()
                .map(|v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8),
        );
        out
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// Raw dump: u32 height, u32 width (little-endian), then f32 values row-major.
    pub fn to_raw(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 + 4 * self.values().len());
        out.extend_from_slice(&(self.height() as u32).to_le_bytes());
        out.extend_from_slice(&(self.width() as u32).to_le_bytes());
        for v in self.values() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        out
    }

    pub fn from_raw(bytes: &[u8]) -> Result<Self> {
        let bad = || Error::invalid("gam", "malformed raw attention map");
        if bytes.len() < 8 {
            return Err(bad());
        }
        let h = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let body = &bytes[8..];
        if body.len() != h * w * 4 {
            return Err(bad());
        }
        let values = body
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        Self::new(h, w, values)
    }

    pub fn write_raw(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_raw()).map_err(|e| Error::io(path, e))
    }
}

/// Everything one recognizer forward/backward pair yields for a batch.
#[derive(Debug, Clone)]
pub struct GamBatch<T> {
    /// Class probabilities `[n, classes]`.
    pub probs: Tensor<T>,
    pub p_max: Vec<T>,
    pub t_gam: Vec<T>,
    pub maps: Vec<GamMap<T>>,
}

/// Attention maps for a batch `[n, c, h, w]`.
///
/// With labels the probabilities come from the margin head (true class
/// penalized); without labels from the plain scaled-cosine softmax. Maps of
/// different images are independent because the recognizer has no
/// cross-sample layers, so one backward pass of the summed gaps serves all.
pub fn compute_gam_batch<T: Scalar>(
    recognizer: &Recognizer<T>,
    images: Tensor<T>,
    labels: Option<&[usize]>,
) -> Result<GamBatch<T>> {
    let classes = recognizer.config.num_classes;
    if classes < 2 {
        return Err(Error::invalid("compute_gam", "recognizer has fewer than 2 classes"));
    }
    let mut pass = forward(recognizer, images)?;
    let tape = &mut pass.tape;
    let cos = recognizer.cosines(tape, &pass.params, pass.output)?;
    let logits = recognizer.logits(tape, cos, labels, 0.0)?;
    let probs = tape.softmax(logits)?;
    let pmax = tape.row_max(probs)?;
    let gap = tape.add_scalar(pmax, -T::one() / T::of(classes as f64));
    let objective = tape.sum(gap);
    let grads = tape.backward(objective, Targets::INPUT)?;
    let dx = grads
        .input_of(pass.input)
        .expect("input gradient was requested");
    let s = dx.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let hw = h * w;
    let maps = dx
        .data()
        .chunks(c * hw)
        .map(|img| {
            let values = (0..hw)
                .map(|p| {
                    (0..c)
                        .map(|ch| img[ch * hw + p].abs())
                        .fold(T::zero(), T::max)
                })
                .collect();
            GamMap::new(h, w, values)
        })
        .collect::<Result<Vec<_>>>()?;
    debug_assert_eq!(maps.len(), n);
    let p_max = tape.value(pmax).data().to_vec();
    let t_gam = tape.value(gap).data().to_vec();
    Ok(GamBatch {
        probs: tape.value(probs).clone(),
        p_max,
        t_gam,
        maps,
    })
}

/// Attention map of one `[c, h, w]` image.
pub fn compute_gam<T: Scalar>(
    recognizer: &Recognizer<T>,
    image: &Tensor<T>,
    label: Option<usize>,
) -> Result<GamMap<T>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    let batch = image.clone().reshape(shape)?;
    let labels = label.map(|l| vec![l]);
    let mut out = compute_gam_batch(recognizer, batch, labels.as_deref())?;
    Ok(out.maps.pop().expect("one map per image"))
}

/// Per-pixel mean of the maps belonging to each group.
pub fn average_gam<T: Scalar>(
    maps: &[GamMap<T>],
    groups: &[usize],
) -> Result<BTreeMap<usize, GamMap<T>>> {
    if maps.len() != groups.len() {
        return Err(Error::shape(
            "average_gam",
            format!("{} maps but {} group labels", maps.len(), groups.len()),
        ));
    }
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    let Some(first) = maps.first() else {
        return Ok(BTreeMap::new());
    };
    let (h, w) = (first.height(), first.width());
    for (map, &g) in maps.iter().zip(groups) {
        if (map.height(), map.width()) != (h, w) {
            return Err(Error::shape(
                "average_gam",
                format!(
                    "map is {}x{}, expected {h}x{w}",
                    map.height(),
                    map.width()
                ),
            ));
        }
        let entry = sums.entry(g).or_insert_with(|| (vec![0.0; h * w], 0));
        for (acc, v) in entry.0.iter_mut().zip(map.values()) {
            *acc += v.as_f64();
        }
        entry.1 += 1;
    }
    sums.into_iter()
        .map(|(g, (acc, count))| {
            let values = acc.iter().map(|v| T::of(v / count as f64)).collect();
            Ok((g, GamMap::new(h, w, values)?))
        })
        .collect()
}
