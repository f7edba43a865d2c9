//! Grouped image datasets: the synthetic multi-group generator, loading from
//! a `root/<group>/<identity>/<image>` tree, pixel normalization and
//! verification-pair sampling.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Eval,
}

/// Images with identity, group and split labels. Images are stored
/// normalized, `[3, side, side]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedDataset {
    pub side: usize,
    pub group_names: Vec<String>,
    pub identity_names: Vec<String>,
    /// Group of each identity.
    pub identity_groups: Vec<usize>,
    pub identity_splits: Vec<Split>,
    pub images: Vec<Tensor<f32>>,
    /// Identity of each image.
    pub identities: Vec<usize>,
    /// Stable per-image key, `group/identity/file`.
    pub keys: Vec<String>,
}

impl GroupedDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_groups(&self) -> usize {
        self.group_names.len()
    }

    pub fn group_of(&self, image: usize) -> usize {
        self.identity_groups[self.identities[image]]
    }

    pub fn split_of(&self, image: usize) -> Split {
        self.identity_splits[self.identities[image]]
    }

    /// Image indices of one split.
    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split_of(i) == split).collect()
    }

    /// Dense class labels `0..n` for the training identities, in identity order.
    pub fn train_classes(&self) -> BTreeMap<usize, usize> {
        self.identity_splits
            .iter()
            .enumerate()
            .filter(|(_, s)| **s == Split::Train)
            .map(|(id, _)| id)
            .enumerate()
            .map(|(class, id)| (id, class))
            .collect()
    }

    pub fn index_of_key(&self) -> HashMap<&str, usize> {
        self.keys.iter().enumerate().map(|(i, k)| (k.as_str(), i)).collect()
    }

    /// Stacks the selected images into `[n, 3, side, side]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let items: Vec<&Tensor<f32>> = indices.iter().map(|&i| &self.images[i]).collect();
        Tensor::stack(&items).expect("dataset images share one shape")
    }

    /// Writes every image as PNG under `root/<group>/<identity>/`.
    pub fn export(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for (i, img) in self.images.iter().enumerate() {
            let path = root.join(&self.keys[i]);
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let raw: Vec<u8> = to_raw_pixels(img)
                .into_iter()
                .map(|v| v.round().clamp(0.0, 255.0) as u8)
                .collect();
            let s = self.side;
            let hwc: Vec<u8> = (0..s * s)
                .flat_map(|p| (0..3).map(move |c| (c, p)))
                .map(|(c, p)| raw[c * s * s + p])
                .collect();
            let buf = image::RgbImage::from_raw(s as u32, s as u32, hwc)
                .expect("buffer matches dimensions");
            buf.save(&path).map_err(|e| Error::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
        }
        Ok(())
    }
}

/// Maps pixel values in `[0, 255]` to `(v - 127.5) / 128`.
pub fn preprocess(raw: &[f32]) -> Result<Vec<f32>> {
    if let Some(bad) = raw.iter().find(|v| !(0.0..=255.0).contains(*v)) {
        return Err(Error::invalid(
            "preprocess",
            format!("pixel value {bad} outside [0, 255]"),
        ));
    }
    Ok(raw.iter().map(|v| (v - 127.5) / 128.0).collect())
}

/// Inverse of [`preprocess`].
pub fn to_raw_pixels(image: &Tensor<f32>) -> Vec<f32> {
    image.data().iter().map(|v| v * 128.0 + 127.5).collect()
}

/// Parameters of the synthetic generator. Strengths are in gray levels.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub groups: usize,
    pub ids_per_group: usize,
    /// Identities per group held out for evaluation (the last ones).
    pub eval_ids_per_group: usize,
    pub images_per_id: usize,
    pub side: usize,
    pub seed: u64,
    /// Amplitude of the group colour cast and group patch texture.
    pub group_signal_strength: f64,
    /// Amplitude of the smooth identity pattern spread over the face.
    pub id_signal_strength: f64,
    /// Amplitude of the fine identity code inside each group's patch.
    pub local_signal_strength: f64,
    /// Per-group weight of the fine code; cycled when shorter than `groups`.
    pub localization: Vec<f64>,
    /// How much a group's localization takes away from its smooth identity
    /// pattern: that pattern is scaled by `1 - broad_tradeoff * localization`.
    pub broad_tradeoff: f64,
    /// Probability that a training image shows a fresh random code in place
    /// of its identity's fine code.
    pub code_corruption: f64,
    /// Same probability for held-out identities.
    pub eval_code_corruption: f64,
    /// Standard deviation of per-pixel noise.
    pub noise: f64,
    /// Largest per-image shift, pixels.
    pub jitter: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            groups: 4,
            ids_per_group: 20,
            eval_ids_per_group: 8,
            images_per_id: 16,
            side: 64,
            seed: 0,
            group_signal_strength: 20.0,
            id_signal_strength: 14.0,
            local_signal_strength: 40.0,
            localization: vec![1.0, 0.5, 0.25, 0.0],
            broad_tradeoff: 0.0,
            code_corruption: 0.5,
            eval_code_corruption: 0.5,
            noise: 10.0,
            jitter: 1,
        }
    }
}

const BROAD_BASIS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (0.0, 1.0),
    (1.0, 1.0),
    (2.0, 0.0),
    (0.0, 2.0),
    (2.0, 1.0),
    (1.0, 2.0),
    (2.0, 2.0),
];

const PATCH_CELLS: usize = 5;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.groups == 0 || self.ids_per_group == 0 || self.images_per_id == 0 {
            return bad("synthetic dataset counts must be at least 1");
        }
        if self.eval_ids_per_group > self.ids_per_group {
            return bad("more evaluation identities than identities per group");
        }
        if self.side < 16 {
            return bad("synthetic images need a side of at least 16 pixels");
        }
        if self.localization.is_empty() {
            return bad("localization needs at least one weight");
        }
        if self.localization.iter().any(|l| !(0.0..=1.0).contains(l)) {
            return bad("localization weights must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.broad_tradeoff) {
            return bad("broad_tradeoff must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.code_corruption)
            || !(0.0..=1.0).contains(&self.eval_code_corruption)
        {
            return bad("code corruption probabilities must lie in [0, 1]");
        }
        Ok(())
    }

    /// Centre of group `g`'s salient patch.
    pub fn patch_center(&self, g: usize) -> (usize, usize) {
        let s = self.side as f64;
        let spots = [(0.34, 0.3), (0.34, 0.7), (0.56, 0.5), (0.76, 0.5)];
        let (r, c) = spots[g % spots.len()];
        ((r * s) as usize, (c * s) as usize)
    }

    /// Side of the square salient patch, pixels.
    pub fn patch_side(&self) -> usize {
        (self.side * 10 / 64).max(PATCH_CELLS)
    }

    pub fn localization_of(&self, g: usize) -> f64 {
        self.localization[g % self.localization.len()]
    }

    /// Index of the group whose identity code is most concentrated.
    pub fn most_localized_group(&self) -> usize {
        (0..self.groups)
            .max_by(|&a, &b| {
                self.localization_of(a)
                    .total_cmp(&self.localization_of(b))
                    .then(b.cmp(&a))
            })
            .unwrap_or(0)
    }
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Identity {
    broad: [f64; 8],
    code: Vec<f64>,
}

fn random_code(rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..PATCH_CELLS * PATCH_CELLS * 3)
        .map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

fn face_template(spec: &SyntheticSpec) -> Vec<f64> {
    let s = spec.side;
    let sf = s as f64;
    let mut out = vec![0.0; 3 * s * s];
    let skin = [150.0, 120.0, 105.0];
    for y in 0..s {
        for x in 0..s {
            let u = (y as f64 + 0.5) / sf - 0.5;
            let v = (x as f64 + 0.5) / sf - 0.5;
            let inside = (u / 0.46).powi(2) + (v / 0.38).powi(2) <= 1.0;
            for c in 0..3 {
                out[(c * s + y) * s + x] = if inside { skin[c] } else { 70.0 };
            }
        }
    }
    let dark = |out: &mut Vec<f64>, cy: f64, cx: f64, ry: f64, rx: f64, val: f64| {
        for y in 0..s {
            for x in 0..s {
                let u = (y as f64 + 0.5) / sf;
                let v = (x as f64 + 0.5) / sf;
                if ((u - cy) / ry).powi(2) + ((v - cx) / rx).powi(2) <= 1.0 {
                    for c in 0..3 {
                        out[(c * s + y) * s + x] = val;
                    }
                }
            }
        }
    };
    dark(&mut out, 0.36, 0.32, 0.03, 0.07, 60.0);
    dark(&mut out, 0.36, 0.68, 0.03, 0.07, 60.0);
    dark(&mut out, 0.78, 0.5, 0.025, 0.12, 80.0);
    out
}

fn in_face(spec: &SyntheticSpec, y: usize, x: usize) -> bool {
    let sf = spec.side as f64;
    let u = (y as f64 + 0.5) / sf - 0.5;
    let v = (x as f64 + 0.5) / sf - 0.5;
    (u / 0.46).powi(2) + (v / 0.38).powi(2) <= 1.0
}

fn render(
    spec: &SyntheticSpec,
    template: &[f64],
    group: usize,
    id: &Identity,
    corruption: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let s = spec.side;
    let sf = s as f64;
    let mut img = template.to_vec();
    let tones = [[1.0, 0.6, 0.3], [-0.6, -0.7, -0.8], [0.3, -0.4, 0.8], [-1.0, 0.2, -0.2]];
    let tone = tones[group % tones.len()];
    let (pr, pc) = spec.patch_center(group);
    let ps = spec.patch_side();
    let (r0, c0) = (pr - ps / 2, pc - ps / 2);
    let local = spec.local_signal_strength * spec.localization_of(group);
    let gs = spec.group_signal_strength;
    let broad_amp =
        spec.id_signal_strength * (1.0 - spec.broad_tradeoff * spec.localization_of(group));
    let fresh: Vec<f64>;
    let code = if rng.gen_bool(corruption) {
        fresh = random_code(rng);
        &fresh
    } else {
        &id.code
    };
    for y in 0..s {
        for x in 0..s {
            if !in_face(spec, y, x) {
                continue;
            }
            let u = y as f64 / sf;
            let v = x as f64 / sf;
            let broad: f64 = BROAD_BASIS
                .iter()
                .zip(&id.broad)
                .map(|(&(a, b), z)| z * (std::f64::consts::PI * a * u).cos() * (std::f64::consts::PI * b * v).cos())
                .sum::<f64>()
                * broad_amp;
            let in_patch = (r0..r0 + ps).contains(&y) && (c0..c0 + ps).contains(&x);
            for c in 0..3 {
                let mut val = gs * tone[c] + broad * [1.0, 0.8, 0.6][c];
                if in_patch {
                    let (py, px) = (y - r0, x - c0);
                    let stripe = if ((py + group * px) / 2) % 2 == 0 { 0.5 } else { -0.5 };
                    let cell = (py * PATCH_CELLS / ps) * PATCH_CELLS + px * PATCH_CELLS / ps;
                    val += gs * stripe + local * code[cell * 3 + c];
                }
                img[(c * s + y) * s + x] += val;
            }
        }
    }
    let j = spec.jitter as i64;
    let (dy, dx) = (rng.gen_range(-j..=j), rng.gen_range(-j..=j));
    let brightness = rng.gen_range(-8.0..8.0);
    let mut out = vec![0f32; 3 * s * s];
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                let sy = (y as i64 - dy).clamp(0, s as i64 - 1) as usize;
                let sx = (x as i64 - dx).clamp(0, s as i64 - 1) as usize;
                let n: f64 = rng.sample(StandardNormal);
                let v = img[(c * s + sy) * s + sx] + brightness + spec.noise * n;
                out[(c * s + y) * s + x] = v.round().clamp(0.0, 255.0) as f32;
            }
        }
    }
    out
}

/// Deterministic synthetic faces: template + group colour and patch texture
/// + a smooth identity pattern + a fine identity code in the group's patch
/// (weighted by the group's localization) + shift, brightness and noise.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<GroupedDataset> {
    spec.validate()?;
    let s = spec.side;
    let template = face_template(spec);
    let mut ds = GroupedDataset {
        side: s,
        group_names: (0..spec.groups).map(|g| format!("group{g}")).collect(),
        identity_names: Vec::new(),
        identity_groups: Vec::new(),
        identity_splits: Vec::new(),
        images: Vec::new(),
        identities: Vec::new(),
        keys: Vec::new(),
    };
    let train_ids = spec.ids_per_group - spec.eval_ids_per_group;
    for g in 0..spec.groups {
        for k in 0..spec.ids_per_group {
            let id_index = ds.identity_names.len();
            let mut rng = stream_rng(spec.seed, (id_index as u64) << 32);
            let mut broad = [0.0; 8];
            for b in broad.iter_mut() {
                *b = rng.sample(StandardNormal);
            }
            let code = random_code(&mut rng);
            let identity = Identity { broad, code };
            let name = format!("id{k:03}");
            let split = if k < train_ids { Split::Train } else { Split::Eval };
            let corruption = match split {
                Split::Train => spec.code_corruption,
                Split::Eval => spec.eval_code_corruption,
            };
            for i in 0..spec.images_per_id {
                let mut rng = stream_rng(spec.seed, ((id_index as u64) << 32) | (i as u64 + 1));
                let raw = render(spec, &template, g, &identity, corruption, &mut rng);
                let img = Tensor::new(vec![3, s, s], preprocess(&raw)?)?;
                ds.images.push(img);
                ds.identities.push(id_index);
                ds.keys.push(format!("{}/{name}/{i:03}.png", ds.group_names[g]));
            }
            ds.identity_names.push(name);
            ds.identity_groups.push(g);
            ds.identity_splits.push(split);
        }
    }
    Ok(ds)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out: Vec<PathBuf> = rd.filter_map(|e| e.ok().map(|e| e.path())).collect();
    out.sort();
    Ok(out)
}

/// Reads `root/<group>/<identity>/<image>`, resizing to `side`. The last
/// `eval_ids_per_group` identities of each group (in name order) form the
/// evaluation split. Undecodable files are skipped with a warning.
pub fn load_image_dataset(
    root: impl AsRef<Path>,
    side: usize,
    eval_ids_per_group: usize,
) -> Result<GroupedDataset> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "dataset directory {} does not exist",
            root.display()
        )));
    }
    let mut ds = GroupedDataset {
        side,
        group_names: Vec::new(),
        identity_names: Vec::new(),
        identity_groups: Vec::new(),
        identity_splits: Vec::new(),
        images: Vec::new(),
        identities: Vec::new(),
        keys: Vec::new(),
    };
    for group_dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let g = ds.group_names.len();
        let gname = file_name(&group_dir);
        let id_dirs: Vec<PathBuf> = sorted_entries(&group_dir)?
            .into_iter()
            .filter(|p| p.is_dir())
            .collect();
        let first_eval = id_dirs.len().saturating_sub(eval_ids_per_group);
        let before = ds.len();
        for (k, id_dir) in id_dirs.iter().enumerate() {
            let id_index = ds.identity_names.len();
            let iname = file_name(id_dir);
            let mut loaded = 0;
            for file in sorted_entries(id_dir)?.into_iter().filter(|p| p.is_file()) {
                match load_image(&file, side) {
                    Ok(img) => {
                        ds.images.push(img);
                        ds.identities.push(id_index);
                        ds.keys
                            .push(format!("{gname}/{iname}/{}", file_name(&file)));
                        loaded += 1;
                    }
                    Err(e) => log::warn!("skipping {}: {e}", file.display()),
                }
            }
            if loaded > 0 {
                ds.identity_names.push(iname);
                ds.identity_groups.push(g);
                ds.identity_splits.push(if k < first_eval {
                    Split::Train
                } else {
                    Split::Eval
                });
            }
        }
        if ds.len() == before {
            return Err(Error::Dataset(format!(
                "group {} contains no readable images",
                group_dir.display()
            )));
        }
        ds.group_names.push(gname);
    }
    if ds.group_names.is_empty() {
        return Err(Error::Dataset(format!(
            "no group directories under {}",
            root.display()
        )));
    }
    Ok(ds)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Decodes one image to a normalized `[3, side, side]` tensor.
pub fn load_image(path: &Path, side: usize) -> Result<Tensor<f32>> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != side || rgb.height() as usize != side {
        rgb = image::imageops::resize(
            &rgb,
            side as u32,
            side as u32,
            image::imageops::FilterType::Triangle,
        );
    }
    let raw: Vec<f32> = (0..3)
        .flat_map(|c| rgb.pixels().map(move |p| p.0[c] as f32))
        .collect();
    Tensor::new(vec![3, side, side], preprocess(&raw)?)
}

/// Two image indices, whether they share an identity, and their group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VerificationPair {
    pub a: usize,
    pub b: usize,
    pub same: bool,
    pub group: usize,
}

/// Within-group pairs from the evaluation split.
pub fn sample_verification_pairs(
    ds: &GroupedDataset,
    per_group_count: usize,
    positive_fraction: f64,
    seed: u64,
) -> Result<Vec<VerificationPair>> {
    if !(0.0..=1.0).contains(&positive_fraction) {
        return Err(Error::invalid(
            "sample_verification_pairs",
            format!("positive fraction {positive_fraction} outside [0, 1]"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_identity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in ds.indices(Split::Eval) {
        by_identity.entry(ds.identities[i]).or_default().push(i);
    }
    let n_pos = (per_group_count as f64 * positive_fraction).round() as usize;
    let mut pairs = Vec::with_capacity(per_group_count * ds.num_groups());
    for g in 0..ds.num_groups() {
        let ids: Vec<&Vec<usize>> = by_identity
            .iter()
            .filter(|(id, _)| ds.identity_groups[**id] == g)
            .map(|(_, imgs)| imgs)
            .collect();
        let multi: Vec<&Vec<usize>> = ids.iter().copied().filter(|v| v.len() >= 2).collect();
        if n_pos > 0 && multi.is_empty() {
            return Err(Error::Dataset(format!(
                "group {} has no evaluation identity with 2 or more images",
                ds.group_names[g]
            )));
        }
        if n_pos < per_group_count && ids.len() < 2 {
            return Err(Error::Dataset(format!(
                "group {} has {} evaluation identities, negative pairs need 2",
                ds.group_names[g],
                ids.len()
            )));
        }
        for k in 0..per_group_count {
            let (a, b, same) = if k < n_pos {
                let imgs = multi[rng.gen_range(0..multi.len())];
                let two: Vec<&usize> = imgs.choose_multiple(&mut rng, 2).collect();
                (*two[0], *two[1], true)
            } else {
                let two: Vec<&&Vec<usize>> = ids.choose_multiple(&mut rng, 2).collect();
                let a = *two[0].choose(&mut rng).expect("identity has images");
                let b = *two[1].choose(&mut rng).expect("identity has images");
                (a, b, false)
            };
            pairs.push(VerificationPair { a, b, same, group: g });
        }
    }
    Ok(pairs)
}

/// `pathA,pathB,same,group` rows keyed by image key and group name.
pub fn pairs_to_csv(ds: &GroupedDataset, pairs: &[VerificationPair]) -> String {
    let mut out = String::from("pathA,pathB,same,group\n");
    for p in pairs {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            ds.keys[p.a],
            ds.keys[p.b],
            u8::from(p.same),
            ds.group_names[p.group]
        );
    }
    out
}

pub fn pairs_from_csv(ds: &GroupedDataset, text: &str) -> Result<Vec<VerificationPair>> {
    let index = ds.index_of_key();
    let groups: HashMap<&str, usize> = ds
        .group_names
        .iter()
        .enumerate()
        .map(|(i, g)| (g.as_str(), i))
        .collect();
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("pathA")) {
            continue;
        }
        let bad = |m: String| Error::Dataset(format!("pairs line {}: {m}", n + 1));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", f.len())));
        }
        let lookup = |k: &str| index.get(k).copied().ok_or_else(|| bad(format!("unknown image {k}")));
        let same = match f[2] {
            "1" => true,
            "0" => false,
            other => return Err(bad(format!("same flag must be 0 or 1, got {other}"))),
        };
        let group = *groups
            .get(f[3])
            .ok_or_else(|| bad(format!("unknown group {}", f[3])))?;
        out.push(VerificationPair {
            a: lookup(f[0])?,
            b: lookup(f[1])?,
            same,
            group,
        });
    }
    Ok(out)
}
