//! Skeleton sequences, joint layouts, the SKL1 file format, modality
//! derivation and dataset manifests.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use rand::{Rng, SeedableRng};

use crate::error::{Error, Result};

pub const SKL1_MAGIC: [u8; 4] = *b"SKL1";
pub const MAX_DIM: u64 = 10_000;
pub const MAX_PERSONS: usize = 2;

/// One sample: coordinates indexed by (person, frame, joint, axis).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonSequence {
    pub coords: Array4<f32>,
    pub label: usize,
}

impl SkeletonSequence {
    pub fn new(coords: Array4<f32>, label: usize) -> Result<Self> {
        let (p, t, v, a) = coords.dim();
        if a != 3 {
            return Err(Error::ShapeMismatch(format!("expected 3 axes, found {a}")));
        }
        if !(1..=MAX_PERSONS).contains(&p) {
            return Err(Error::ShapeOverflow { name: "P", value: p as u64 });
        }
        if t == 0 {
            return Err(Error::EmptySequence);
        }
        if v == 0 {
            return Err(Error::ShapeOverflow { name: "V", value: 0 });
        }
        if let Some(index) = coords.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFiniteData { index });
        }
        let coords = if coords.is_standard_layout() { coords } else { coords.as_standard_layout().into_owned() };
        Ok(Self { coords, label })
    }

    pub fn person_count(&self) -> usize {
        self.coords.dim().0
    }

    pub fn frame_count(&self) -> usize {
        self.coords.dim().1
    }

    pub fn joint_count(&self) -> usize {
        self.coords.dim().2
    }

    /// Network input for each person, laid out as `3 x T x V`.
    pub fn person_inputs(&self) -> Vec<Array3<f64>> {
        (0..self.person_count())
            .map(|p| {
                let view = self.coords.slice(s![p, .., .., ..]);
                let (t, v, _) = view.dim();
                Array3::from_shape_fn((3, t, v), |(a, ti, vi)| f64::from(view[[ti, vi, a]]))
            })
            .collect()
    }
}

/// Physical joint topology as a spanning tree of (parent, child) edges.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkeletonLayout {
    pub joint_count: usize,
    pub edges: Vec<(usize, usize)>,
    pub center_joint: usize,
}

// NTU RGB+D, 0-based (parent, child), rooted at the spine (joint 20).
const NTU25_EDGES: [(usize, usize); 24] = [
    (1, 0), (20, 1), (20, 2), (2, 3), (20, 4), (4, 5), (5, 6), (6, 7),
    (20, 8), (8, 9), (9, 10), (10, 11), (0, 12), (12, 13), (13, 14), (14, 15),
    (0, 16), (16, 17), (17, 18), (18, 19), (22, 21), (7, 22), (24, 23), (11, 24),
];

// Northwestern-UCLA, rooted at the shoulder center (joint 2).
const UCLA20_EDGES: [(usize, usize); 19] = [
    (1, 0), (2, 1), (2, 3), (2, 4), (4, 5), (5, 6), (6, 7), (2, 8), (8, 9), (9, 10),
    (10, 11), (0, 12), (12, 13), (13, 14), (14, 15), (0, 16), (16, 17), (17, 18), (18, 19),
];

impl SkeletonLayout {
    pub fn new(joint_count: usize, edges: Vec<(usize, usize)>, center_joint: usize) -> Result<Self> {
        let layout = Self { joint_count, edges, center_joint };
        layout.validate()?;
        Ok(layout)
    }

    pub fn ntu25() -> Self {
        Self::new(25, NTU25_EDGES.to_vec(), 20).expect("valid NTU layout")
    }

    pub fn ucla20() -> Self {
        Self::new(20, UCLA20_EDGES.to_vec(), 1).expect("valid UCLA layout")
    }

    /// Path graph 0-1-...-(v-1) rooted at joint 0.
    pub fn chain(v: usize) -> Self {
        let edges = (1..v).map(|c| (c - 1, c)).collect();
        Self::new(v, edges, 0).expect("valid chain layout")
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "ntu25" => Ok(Self::ntu25()),
            "ucla20" => Ok(Self::ucla20()),
            other => match other.strip_prefix("chain").and_then(|n| n.parse::<usize>().ok()) {
                Some(v) if v >= 2 => Ok(Self::chain(v)),
                _ => Err(Error::Config(format!("unknown layout {other:?}"))),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.joint_count;
        if v == 0 {
            return Err(Error::InvalidLayout("no joints".into()));
        }
        if self.center_joint >= v {
            return Err(Error::InvalidLayout(format!("center joint {} out of range", self.center_joint)));
        }
        if self.edges.len() != v - 1 {
            return Err(Error::InvalidLayout(format!("{} edges for {v} joints", self.edges.len())));
        }
        let mut parent = vec![None; v];
        for &(p, c) in &self.edges {
            if p >= v || c >= v || p == c {
                return Err(Error::InvalidLayout(format!("bad edge ({p}, {c})")));
            }
            if parent[c].replace(p).is_some() {
                return Err(Error::InvalidLayout(format!("joint {c} has two parents")));
            }
        }
        let roots: Vec<usize> = (0..v).filter(|&j| parent[j].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::InvalidLayout(format!("{} roots", roots.len())));
        }
        // every joint must reach the root without revisiting
        for start in 0..v {
            let mut j = start;
            for _ in 0..v {
                match parent[j] {
                    Some(p) => j = p,
                    None => break,
                }
            }
            if parent[j].is_some() {
                return Err(Error::InvalidLayout("cycle in edge list".into()));
            }
        }
        Ok(())
    }

    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut parent = vec![None; self.joint_count];
        for &(p, c) in &self.edges {
            parent[c] = Some(p);
        }
        parent
    }

    pub fn root(&self) -> usize {
        self.parents().iter().position(Option::is_none).expect("validated tree has a root")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Joint, Modality::Bone, Modality::JointMotion, Modality::BoneMotion];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
            Modality::JointMotion => "joint_motion",
            Modality::BoneMotion => "bone_motion",
        }
    }
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown modality {s:?}")))
    }
}

pub fn encode_sequence(seq: &SkeletonSequence) -> Vec<u8> {
    let (p, t, v, _) = seq.coords.dim();
    let mut out = Vec::with_capacity(20 + seq.coords.len() * 4);
    out.extend_from_slice(&SKL1_MAGIC);
    for dim in [p, t, v, seq.label] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for x in seq.coords.iter() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_sequence(bytes: &[u8]) -> Result<SkeletonSequence> {
    if bytes.len() < 4 {
        return Err(Error::TruncatedFile { needed: 20, have: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if magic != SKL1_MAGIC {
        return Err(Error::MagicMismatch { expected: SKL1_MAGIC, found: magic });
    }
    if bytes.len() < 20 {
        return Err(Error::TruncatedFile { needed: 20, have: bytes.len() });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let (p, t, v, label) = (word(0), word(1), word(2), word(3));
    for (name, value) in [("P", p), ("T", t), ("V", v)] {
        if u64::from(value) > MAX_DIM {
            return Err(Error::ShapeOverflow { name, value: value.into() });
        }
    }
    let (p, t, v) = (p as usize, t as usize, v as usize);
    let count = p * t * v * 3;
    let needed = 20 + count * 4;
    if bytes.len() < needed {
        return Err(Error::TruncatedFile { needed, have: bytes.len() });
    }
    if bytes.len() > needed {
        return Err(Error::TrailingData { extra: bytes.len() - needed });
    }
    let data: Vec<f32> = bytes[20..needed]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let coords = Array4::from_shape_vec((p, t, v, 3), data).expect("length checked");
    SkeletonSequence::new(coords, label as usize)
}

pub fn write_sequence(path: impl AsRef<Path>, seq: &SkeletonSequence) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_sequence(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_sequence(path: impl AsRef<Path>) -> Result<SkeletonSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_sequence(&bytes)
}

fn bones(coords: &Array4<f32>, layout: &SkeletonLayout) -> Array4<f32> {
    let mut out = Array4::zeros(coords.raw_dim());
    for &(p, c) in &layout.edges {
        let diff = &coords.slice(s![.., .., c, ..]) - &coords.slice(s![.., .., p, ..]);
        out.slice_mut(s![.., .., c, ..]).assign(&diff);
    }
    out
}

fn motion(coords: &Array4<f32>) -> Array4<f32> {
    let t = coords.dim().1;
    let mut out = Array4::zeros(coords.raw_dim());
    if t > 1 {
        let diff = &coords.slice(s![.., 1.., .., ..]) - &coords.slice(s![.., ..t - 1, .., ..]);
        out.slice_mut(s![.., ..t - 1, .., ..]).assign(&diff);
    }
    out
}

pub fn derive_modality(seq: &SkeletonSequence, modality: Modality, layout: &SkeletonLayout) -> Result<SkeletonSequence> {
    if layout.joint_count != seq.joint_count() {
        return Err(Error::LayoutMismatch { layout: layout.joint_count, sequence: seq.joint_count() });
    }
    let coords = match modality {
        Modality::Joint => seq.coords.clone(),
        Modality::Bone => bones(&seq.coords, layout),
        Modality::JointMotion => motion(&seq.coords),
        Modality::BoneMotion => motion(&bones(&seq.coords, layout)),
    };
    Ok(SkeletonSequence { coords, label: seq.label })
}

/// Linear interpolation onto `target` uniformly spaced frame positions.
pub fn resample_time(seq: &SkeletonSequence, target: usize) -> Result<SkeletonSequence> {
    let (p, t, v, _) = seq.coords.dim();
    if t == 0 || target == 0 {
        return Err(Error::EmptySequence);
    }
    if target == t {
        return Ok(seq.clone());
    }
    let mut out = Array4::<f32>::zeros((p, target, v, 3));
    for j in 0..target {
        let pos = if target == 1 { 0.0 } else { j as f64 * (t - 1) as f64 / (target - 1) as f64 };
        let i0 = (pos.floor() as usize).min(t - 1);
        let frac = pos - i0 as f64;
        if frac == 0.0 || i0 + 1 >= t {
            let src = seq.coords.slice(s![.., i0, .., ..]);
            out.slice_mut(s![.., j, .., ..]).assign(&src);
            continue;
        }
        for pi in 0..p {
            for vi in 0..v {
                for a in 0..3 {
                    let lo = f64::from(seq.coords[[pi, i0, vi, a]]);
                    let hi = f64::from(seq.coords[[pi, i0 + 1, vi, a]]);
                    out[[pi, j, vi, a]] = (lo + (hi - lo) * frac) as f32;
                }
            }
        }
    }
    Ok(SkeletonSequence { coords: out, label: seq.label })
}

/// Translates every person so that the first person's center joint sits at
/// the origin in the first frame.
pub fn center_sequence(seq: &SkeletonSequence, layout: &SkeletonLayout) -> Result<SkeletonSequence> {
    if layout.joint_count != seq.joint_count() {
        return Err(Error::LayoutMismatch { layout: layout.joint_count, sequence: seq.joint_count() });
    }
    let origin = seq.coords.slice(s![0, 0, layout.center_joint, ..]).to_owned();
    let mut coords = seq.coords.clone();
    for mut frame in coords.lanes_mut(ndarray::Axis(3)) {
        frame -= &origin;
    }
    Ok(SkeletonSequence { coords, label: seq.label })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: usize,
    pub split: Split,
}

/// Parses `relative/path<TAB>label<TAB>split` lines; paths resolve against `base`.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| Error::Data(format!("manifest line {}: {what}", lineno + 1));
        if fields.len() != 3 {
            return Err(bad("expected 3 tab-separated fields"));
        }
        let label = fields[1].parse().map_err(|_| bad("label is not an integer"))?;
        let split = match fields[2] {
            "train" => Split::Train,
            "val" => Split::Val,
            _ => return Err(bad("split must be train or val")),
        };
        entries.push(ManifestEntry { path: base.join(fields[0]), label, split });
    }
    Ok(entries)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path.parent().unwrap_or(Path::new(".")))
}

/// A preprocessed sample ready for the network: one `3 x T x V` tensor per person.
#[derive(Debug, Clone)]
pub struct Sample {
    pub persons: Vec<Array3<f64>>,
    pub label: usize,
}

/// Centering, temporal resampling and modality derivation, in that order.
pub fn preprocess(seq: &SkeletonSequence, layout: &SkeletonLayout, frames: usize, modality: Modality) -> Result<Sample> {
    let centered = center_sequence(seq, layout)?;
    let resampled = resample_time(&centered, frames)?;
    let derived = derive_modality(&resampled, modality, layout)?;
    Ok(Sample { persons: derived.person_inputs(), label: derived.label })
}

pub fn load_split(
    manifest: &[ManifestEntry],
    split: Split,
    layout: &SkeletonLayout,
    frames: usize,
    modality: Modality,
) -> Result<Vec<Sample>> {
    manifest
        .iter()
        .filter(|e| e.split == split)
        .map(|e| {
            let seq = load_sequence(&e.path)?;
            if seq.label != e.label {
                return Err(Error::Data(format!(
                    "{}: header label {} disagrees with manifest label {}",
                    e.path.display(),
                    seq.label,
                    e.label
                )));
            }
            preprocess(&seq, layout, frames, modality)
        })
        .collect()
}

/// Synthetic separable sequences: each class oscillates along its own axis
/// with its own frequency, plus small seeded noise.
pub fn synthetic_sequence(layout: &SkeletonLayout, frames: usize, label: usize, classes: usize, seed: u64) -> SkeletonSequence {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let v = layout.joint_count;
    let axis = label % 3;
    let freq = 1.0 + (label / 3) as f64 + label as f64 / classes.max(1) as f64;
    let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let coords = Array4::from_shape_fn((1, frames, v, 3), |(_, t, j, a)| {
        let base = j as f64 * 0.1;
        let wave = if a == axis {
            0.5 * (freq * t as f64 / frames as f64 * std::f64::consts::TAU + phase + j as f64 * 0.3).sin()
        } else {
            0.0
        };
        (base + wave + rng.random_range(-0.02..0.02)) as f32
    });
    SkeletonSequence::new(coords, label).expect("synthetic data is valid")
}

/// Writes `count` synthetic sequences plus a manifest (every 4th round of
/// classes in `val` when `with_val` is set, so both splits stay balanced) and returns the manifest path.
pub fn write_synthetic_dataset(
    dir: &Path,
    layout: &SkeletonLayout,
    frames: usize,
    classes: usize,
    count: usize,
    with_val: bool,
    seed: u64,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for i in 0..count {
        let label = i % classes;
        let seq = synthetic_sequence(layout, frames, label, classes, seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let name = format!("sample_{i:04}.skl");
        write_sequence(dir.join(&name), &seq)?;
        let split = if with_val && (i / classes) % 4 == 3 { "val" } else { "train" };
        manifest.push_str(&format!("{name}\t{label}\t{split}\n"));
    }
    let path = dir.join("manifest.tsv");
    fs::write(&path, manifest).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};

    fn random_seq(seed: u64, p: usize, t: usize, v: usize) -> SkeletonSequence {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let coords = Array4::from_shape_simple_fn((p, t, v, 3), || rng.random_range(-1.0f32..1.0));
        SkeletonSequence::new(coords, 1).unwrap()
    }

    #[test]
    fn zero_payload_loads_as_zeros() {
        let mut bytes = b"SKL1".to_vec();
        for d in [1u32, 2, 3, 0] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, 18 * 4));
        let seq = decode_sequence(&bytes).unwrap();
        assert_eq!(seq.coords.dim(), (1, 2, 3, 3));
        assert!(seq.coords.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bad_magic_truncation_and_overflow() {
        let seq = random_seq(1, 1, 2, 3);
        let mut bytes = encode_sequence(&seq);
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_sequence(&bytes), Err(Error::MagicMismatch { .. })));

        let bytes = encode_sequence(&seq);
        assert!(matches!(decode_sequence(&bytes[..bytes.len() - 1]), Err(Error::TruncatedFile { .. })));
        assert!(matches!(decode_sequence(&bytes[..10]), Err(Error::TruncatedFile { .. })));

        let mut big = bytes.clone();
        big[8..12].copy_from_slice(&20_000u32.to_le_bytes());
        assert!(matches!(decode_sequence(&big), Err(Error::ShapeOverflow { name: "T", .. })));

        let mut nan = bytes.clone();
        nan[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_sequence(&nan), Err(Error::NonFiniteData { index: 1 })));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = random_seq(2, 2, 5, 25);
        let path = dir.path().join("a.skl");
        write_sequence(&path, &seq).unwrap();
        assert_eq!(load_sequence(&path).unwrap(), seq);
    }

    proptest! {
        #[test]
        fn encode_decode_is_bitwise_identity(
            p in 1usize..=2, t in 1usize..6, v in 1usize..6, label in 0usize..100,
            seed in any::<u64>(),
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let coords = Array4::from_shape_simple_fn((p, t, v, 3), || {
                f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)
            });
            let seq = SkeletonSequence::new(coords, label).unwrap();
            let back = decode_sequence(&encode_sequence(&seq)).unwrap();
            prop_assert_eq!(back.label, label);
            prop_assert!(back.coords.iter().zip(seq.coords.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }

    #[test]
    fn shipped_layouts_are_trees() {
        for layout in [SkeletonLayout::ntu25(), SkeletonLayout::ucla20(), SkeletonLayout::chain(5)] {
            layout.validate().unwrap();
        }
        assert_eq!(SkeletonLayout::ntu25().root(), 20);
        assert_eq!(SkeletonLayout::ucla20().root(), 2);
        assert!(SkeletonLayout::new(3, vec![(0, 1), (1, 0)], 0).is_err());
        assert!(SkeletonLayout::new(3, vec![(0, 1), (2, 1)], 0).is_err());
        assert!(SkeletonLayout::new(3, vec![(0, 1)], 0).is_err());
    }

    #[test]
    fn joint_motion_of_constant_sequence_is_zero() {
        let coords = Array4::from_shape_fn((1, 4, 3, 3), |(_, _, v, a)| (v * 3 + a) as f32);
        let seq = SkeletonSequence::new(coords, 0).unwrap();
        let m = derive_modality(&seq, Modality::JointMotion, &SkeletonLayout::chain(3)).unwrap();
        assert!(m.coords.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn bone_of_two_joints() {
        let coords = Array4::from_shape_vec((1, 1, 2, 3), vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0]).unwrap();
        let seq = SkeletonSequence::new(coords, 0).unwrap();
        let b = derive_modality(&seq, Modality::Bone, &SkeletonLayout::chain(2)).unwrap();
        assert_eq!(b.coords.as_slice().unwrap(), &[0.0, 0.0, 0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn bone_path_sum_recovers_root_relative_positions() {
        let layout = SkeletonLayout::ntu25();
        let parents = layout.parents();
        let root = layout.root();
        let seq = random_seq(3, 2, 4, 25);
        let bone = derive_modality(&seq, Modality::Bone, &layout).unwrap();
        for p in 0..2 {
            for t in 0..4 {
                for c in 0..25 {
                    for a in 0..3 {
                        let mut sum = 0.0f64;
                        let mut j = c;
                        while let Some(par) = parents[j] {
                            sum += f64::from(bone.coords[[p, t, j, a]]);
                            j = par;
                        }
                        let expect = f64::from(seq.coords[[p, t, c, a]]) - f64::from(seq.coords[[p, t, root, a]]);
                        assert!((sum - expect).abs() <= 1e-6, "{sum} vs {expect}");
                    }
                }
            }
        }
    }

    #[test]
    fn modalities_preserve_shape_and_check_layout() {
        let seq = random_seq(4, 1, 6, 20);
        for m in Modality::ALL {
            let out = derive_modality(&seq, m, &SkeletonLayout::ucla20()).unwrap();
            assert_eq!(out.coords.dim(), seq.coords.dim());
        }
        assert!(matches!(
            derive_modality(&seq, Modality::Bone, &SkeletonLayout::ntu25()),
            Err(Error::LayoutMismatch { .. })
        ));
        let bm = derive_modality(&seq, Modality::BoneMotion, &SkeletonLayout::ucla20()).unwrap();
        let b = derive_modality(&seq, Modality::Bone, &SkeletonLayout::ucla20()).unwrap();
        assert!((bm.coords[[0, 2, 5, 1]] - (b.coords[[0, 3, 5, 1]] - b.coords[[0, 2, 5, 1]])).abs() < 1e-7);
        assert_eq!(bm.coords[[0, 5, 5, 1]], 0.0);
    }

    #[test]
    fn resample_identity_and_midpoint() {
        let seq = random_seq(5, 1, 64, 3);
        assert_eq!(resample_time(&seq, 64).unwrap(), seq);

        let coords = Array4::from_shape_vec((1, 2, 1, 3), vec![0.0, 2.0, 4.0, 1.0, 4.0, 8.0]).unwrap();
        let two = SkeletonSequence::new(coords, 0).unwrap();
        let three = resample_time(&two, 3).unwrap();
        assert_eq!(three.coords.as_slice().unwrap(), &[0.0, 2.0, 4.0, 0.5, 3.0, 6.0, 1.0, 4.0, 8.0]);
        assert!(matches!(resample_time(&two, 0), Err(Error::EmptySequence)));
    }

    fn piecewise_linear(frames: &[f64], pos: f64) -> f64 {
        let i = (pos.floor() as usize).min(frames.len() - 2);
        frames[i] + (frames[i + 1] - frames[i]) * (pos - i as f64)
    }

    #[test]
    fn resample_down_then_up_matches_piecewise_linear_oracle() {
        let seq = random_seq(6, 1, 10, 2);
        let down = resample_time(&seq, 5).unwrap();
        let up = resample_time(&down, 10).unwrap();
        for v in 0..2 {
            for a in 0..3 {
                let orig: Vec<f64> = (0..10).map(|t| f64::from(seq.coords[[0, t, v, a]])).collect();
                let mid: Vec<f64> = (0..5).map(|j| piecewise_linear(&orig, j as f64 * 9.0 / 4.0)).collect();
                for j in 0..10 {
                    let expect = piecewise_linear(&mid, j as f64 * 4.0 / 9.0);
                    assert!((f64::from(up.coords[[0, j, v, a]]) - expect).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn centering_moves_center_joint_to_origin() {
        let layout = SkeletonLayout::ucla20();
        let seq = random_seq(7, 2, 3, 20);
        let c = center_sequence(&seq, &layout).unwrap();
        for a in 0..3 {
            assert_eq!(c.coords[[0, 0, 1, a]], 0.0);
        }
    }

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("a.skl\t3\ttrain\n\nb/c.skl\t0\tval\n", Path::new("/d")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].path, PathBuf::from("/d/b/c.skl"));
        assert_eq!(m[1].split, Split::Val);
        assert!(parse_manifest("a.skl\tx\ttrain\n", Path::new(".")).is_err());
        assert!(parse_manifest("a.skl\t1\ttest\n", Path::new(".")).is_err());
    }
}
