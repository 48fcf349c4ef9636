//! Line-oriented text model files.
//!
//! A head file starts with `singqa-head 1`, followed by `key value...` lines.
//! Parameters are f32 written in shortest round-trip scientific notation, so
//! a write/read cycle reproduces them bit for bit. A `bias_branch 1` line opens
//! the optional bias-correction section.
//!
//! A fusion file starts with `singqa-fusion 1` and lists its members as
//! `member <id> <sha256> <path>` in combiner order. Relative member paths are
//! resolved against the fusion file's directory; digests are checked at load.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::bias::{self, BiasBranch};
use crate::error::{Error, Result};
use crate::fusion::FusionModel;
use crate::heads::{HeadConfig, HeadInput, HeadVariant, LayerNormAffine, PredictorHead};
use crate::manifest::portable_path;
use crate::pitch::HistogramNorm;

pub const HEAD_MAGIC: &str = "singqa-head";
pub const FUSION_MAGIC: &str = "singqa-fusion";
pub const FORMAT_VERSION: u32 = 1;
pub const BIAS_SECTION: &str = "bias_branch";
pub const BIAS_SECTION_VERSION: u32 = 1;

/// A trained head with its optional bias branch.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadModel {
    pub head: PredictorHead,
    pub bias: Option<BiasBranch>,
}

impl HeadModel {
    pub fn new(head: PredictorHead, bias: Option<BiasBranch>) -> Result<Self> {
        head.validate()?;
        if let Some(b) = &bias {
            b.validate(head.config.feature_dim())?;
        }
        Ok(Self { head, bias })
    }

    /// Corrected score when a branch is present, plain head score otherwise.
    pub fn score(&self, input: &HeadInput) -> Result<f64> {
        let v = self.head.feature_vector(input)?;
        match &self.bias {
            Some(b) => bias::forward_corrected(&self.head, b, &v),
            None => self.head.forward(&v),
        }
    }
}

fn floats(out: &mut String, key: &str, values: &[f32]) {
    out.push_str(key);
    for v in values {
        let _ = write!(out, " {v:e}");
    }
    out.push('\n');
}

pub fn head_model_to_string(model: &HeadModel) -> String {
    let h = &model.head;
    let c = &h.config;
    let mut out = String::new();
    let _ = writeln!(out, "{HEAD_MAGIC} {FORMAT_VERSION}");
    let _ = writeln!(out, "variant {}", c.variant);
    let _ = writeln!(out, "embedding_dim {}", c.embedding_dim);
    let _ = writeln!(out, "aux_dim {}", c.aux_dim);
    let _ = writeln!(out, "raw_aux_dim {}", c.raw_aux_dim);
    let _ = writeln!(out, "layer_norm {}", c.use_layer_norm);
    let _ = writeln!(out, "histogram_norm {}", c.histogram_norm.name());
    let _ = writeln!(out, "seed {}", c.seed);
    floats(&mut out, "weights", &h.weights);
    floats(&mut out, "bias", &[h.bias]);
    if let Some(n) = &h.norm {
        floats(&mut out, "norm_scale", &n.scale);
        floats(&mut out, "norm_offset", &n.offset);
    }
    if let Some(p) = &h.projection {
        floats(&mut out, "projection", p);
    }
    if let Some(b) = &model.bias {
        let _ = writeln!(out, "{BIAS_SECTION} {BIAS_SECTION_VERSION}");
        let _ = writeln!(out, "alpha {:?}", b.alpha);
        let _ = writeln!(out, "beta {:?}", b.beta);
        floats(&mut out, "add_weights", &b.add_weights);
        floats(&mut out, "add_bias", &[b.add_bias]);
        floats(&mut out, "sub_weights", &b.sub_weights);
        floats(&mut out, "sub_bias", &[b.sub_bias]);
    }
    out
}

struct Fields<'a> {
    path: &'a Path,
    map: HashMap<&'a str, (usize, &'a str)>,
}

impl<'a> Fields<'a> {
    fn err(&self, line: usize, message: impl Into<String>) -> Error {
        Error::ModelFormat {
            path: self.path.to_path_buf(),
            line,
            message: message.into(),
        }
    }

    fn raw(&self, key: &str) -> Result<(usize, &'a str)> {
        self.map
            .get(key)
            .copied()
            .ok_or_else(|| self.err(0, format!("missing `{key}`")))
    }

    fn has(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let (line, v) = self.raw(key)?;
        v.trim()
            .parse()
            .map_err(|_| self.err(line, format!("bad value for `{key}`")))
    }

    fn floats(&self, key: &str, len: usize) -> Result<Vec<f32>> {
        let (line, v) = self.raw(key)?;
        let vals = v
            .split_ascii_whitespace()
            .map(|t| t.parse::<f32>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| self.err(line, format!("bad number in `{key}`")))?;
        if vals.len() != len {
            return Err(self.err(
                line,
                format!("`{key}` has {} values, expected {len}", vals.len()),
            ));
        }
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(self.err(line, format!("non-finite value in `{key}`")));
        }
        Ok(vals)
    }

    fn scalar(&self, key: &str) -> Result<f32> {
        Ok(self.floats(key, 1)?[0])
    }
}

fn split_line(line: &str) -> (&str, &str) {
    match line.split_once(char::is_whitespace) {
        Some((k, v)) => (k, v),
        None => (line, ""),
    }
}

/// Checks the `magic version` first line; returns the numbered remaining lines.
fn header<'a>(text: &'a str, path: &Path, magic: &str) -> Result<Vec<(usize, &'a str)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end()))
        .filter(|(_, l)| !l.is_empty());
    let bad = |line, message: String| Error::ModelFormat {
        path: path.to_path_buf(),
        line,
        message,
    };
    let (n, first) = lines
        .next()
        .ok_or_else(|| bad(1, "empty model file".into()))?;
    let (m, v) = split_line(first);
    if m != magic {
        return Err(bad(n, format!("expected `{magic}` header, found `{m}`")));
    }
    if v.trim() != FORMAT_VERSION.to_string() {
        return Err(bad(
            n,
            format!("unsupported {magic} version `{}`", v.trim()),
        ));
    }
    Ok(lines.collect())
}

fn collect_fields<'a>(path: &'a Path, lines: &[(usize, &'a str)]) -> Result<Fields<'a>> {
    let mut map = HashMap::new();
    for &(n, line) in lines {
        let (k, v) = split_line(line);
        if map.insert(k, (n, v)).is_some() {
            return Err(Error::ModelFormat {
                path: path.to_path_buf(),
                line: n,
                message: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(Fields { path, map })
}

const HEAD_KEYS: &[&str] = &[
    "variant",
    "embedding_dim",
    "aux_dim",
    "raw_aux_dim",
    "layer_norm",
    "histogram_norm",
    "seed",
    "weights",
    "bias",
    "norm_scale",
    "norm_offset",
    "projection",
];
const BIAS_KEYS: &[&str] = &[
    "alpha",
    "beta",
    "add_weights",
    "add_bias",
    "sub_weights",
    "sub_bias",
];

pub fn parse_head_model(text: &str, path: &Path) -> Result<HeadModel> {
    let lines = header(text, path, HEAD_MAGIC)?;
    let split = lines
        .iter()
        .position(|(_, l)| split_line(l).0 == BIAS_SECTION);
    let (head_lines, bias_lines) = match split {
        Some(i) => (&lines[..i], Some(&lines[i..])),
        None => (&lines[..], None),
    };
    let f = collect_fields(path, head_lines)?;
    for (k, (n, _)) in &f.map {
        if !HEAD_KEYS.contains(k) {
            return Err(f.err(*n, format!("unknown key `{k}`")));
        }
    }
    let (vline, vname) = f.raw("variant")?;
    let variant: HeadVariant = vname
        .trim()
        .parse()
        .map_err(|_| f.err(vline, format!("unknown variant `{}`", vname.trim())))?;
    let (nline, nname) = f.raw("histogram_norm")?;
    let histogram_norm =
        HistogramNorm::parse(nname.trim()).map_err(|e| f.err(nline, e.to_string()))?;
    let config = HeadConfig {
        variant,
        embedding_dim: f.parse("embedding_dim")?,
        aux_dim: f.parse("aux_dim")?,
        raw_aux_dim: f.parse("raw_aux_dim")?,
        use_layer_norm: f.parse("layer_norm")?,
        histogram_norm,
        seed: f.parse("seed")?,
    };
    config.validate().map_err(|e| f.err(vline, e.to_string()))?;
    let dim = config.feature_dim();
    let norm = if config.use_layer_norm {
        Some(LayerNormAffine {
            scale: f.floats("norm_scale", dim)?,
            offset: f.floats("norm_offset", dim)?,
        })
    } else {
        if f.has("norm_scale") || f.has("norm_offset") {
            return Err(f.err(0, "layer-norm parameters without layer_norm true"));
        }
        None
    };
    let projection = if variant == HeadVariant::Spectrum {
        Some(f.floats("projection", config.aux_dim * config.raw_aux_dim)?)
    } else {
        if f.has("projection") {
            return Err(f.err(0, "projection given for a non-spectrum head"));
        }
        None
    };
    let head = PredictorHead {
        weights: f.floats("weights", dim)?,
        bias: f.scalar("bias")?,
        projection,
        norm,
        config,
    };

    let bias = match bias_lines {
        None => None,
        Some(lines) => {
            let (n, first) = lines[0];
            if split_line(first).1.trim() != BIAS_SECTION_VERSION.to_string() {
                return Err(f.err(n, "unsupported bias_branch version"));
            }
            let b = collect_fields(path, &lines[1..])?;
            for (k, (n, _)) in &b.map {
                if !BIAS_KEYS.contains(k) {
                    return Err(b.err(*n, format!("unknown key `{k}` in bias_branch")));
                }
            }
            Some(BiasBranch {
                alpha: b.parse("alpha")?,
                beta: b.parse("beta")?,
                add_weights: b.floats("add_weights", dim)?,
                add_bias: b.scalar("add_bias")?,
                sub_weights: b.floats("sub_weights", dim)?,
                sub_bias: b.scalar("sub_bias")?,
            })
        }
    };
    HeadModel::new(head, bias).map_err(|e| Error::ModelFormat {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_head_model(model: &HeadModel, path: &Path) -> Result<()> {
    fs::write(path, head_model_to_string(model)).map_err(|e| Error::io(path, e))
}

pub fn read_head_model(path: &Path) -> Result<HeadModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_head_model(&text, path)
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionMember {
    pub id: String,
    pub digest: String,
    /// As written in the file; see [`FusionFile::member_path`].
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionFile {
    pub model: FusionModel,
    pub members: Vec<FusionMember>,
}

impl FusionFile {
    /// Path of member `i` resolved against the fusion file's directory.
    pub fn member_path(&self, i: usize, fusion_path: &Path) -> PathBuf {
        let p = &self.members[i].path;
        if p.is_absolute() {
            p.clone()
        } else {
            fusion_path.parent().unwrap_or(Path::new("")).join(p)
        }
    }
}

pub fn fusion_to_string(file: &FusionFile) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{FUSION_MAGIC} {FORMAT_VERSION}");
    for m in &file.members {
        let _ = writeln!(out, "member {} {} {}", m.id, m.digest, m.path.display());
    }
    floats(&mut out, "weights", &file.model.combiner_weights);
    floats(&mut out, "bias", &[file.model.combiner_bias]);
    out
}

/// Writes a fusion file; `member_paths` are in combiner order and must exist.
pub fn write_fusion_file(model: &FusionModel, member_paths: &[PathBuf], path: &Path) -> Result<()> {
    model.validate()?;
    if member_paths.len() != model.k() {
        return Err(Error::DimensionMismatch {
            expected: model.k(),
            got: member_paths.len(),
        });
    }
    if let Some(id) = model
        .member_ids
        .iter()
        .find(|id| id.is_empty() || id.contains(char::is_whitespace))
    {
        return Err(Error::InvalidConfig(format!(
            "member id `{id}` must be non-empty without whitespace"
        )));
    }
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let members = model
        .member_ids
        .iter()
        .zip(member_paths)
        .map(|(id, p)| {
            Ok(FusionMember {
                id: id.clone(),
                digest: sha256_file(p)?,
                path: portable_path(p, dir),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = FusionFile {
        model: model.clone(),
        members,
    };
    fs::write(path, fusion_to_string(&file)).map_err(|e| Error::io(path, e))
}

pub fn parse_fusion(text: &str, path: &Path) -> Result<FusionFile> {
    let lines = header(text, path, FUSION_MAGIC)?;
    let bad = |line, message: String| Error::ModelFormat {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut members = Vec::new();
    let mut rest = Vec::new();
    for &(n, line) in &lines {
        let (k, v) = split_line(line);
        if k != "member" {
            rest.push((n, line));
            continue;
        }
        let mut parts = v.trim_start().splitn(3, ' ');
        match (parts.next(), parts.next(), parts.next()) {
            (Some(id), Some(digest), Some(p)) if !id.is_empty() && !p.is_empty() => {
                if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
                    return Err(bad(n, format!("bad sha256 digest `{digest}`")));
                }
                members.push(FusionMember {
                    id: id.to_string(),
                    digest: digest.to_ascii_lowercase(),
                    path: PathBuf::from(p),
                });
            }
            _ => return Err(bad(n, "expected `member <id> <sha256> <path>`".into())),
        }
    }
    if members.is_empty() {
        return Err(bad(0, "fusion file lists no members".into()));
    }
    let f = collect_fields(path, &rest)?;
    for (k, (n, _)) in &f.map {
        if !["weights", "bias"].contains(k) {
            return Err(f.err(*n, format!("unknown key `{k}`")));
        }
    }
    let model = FusionModel {
        member_ids: members.iter().map(|m| m.id.clone()).collect(),
        combiner_weights: f.floats("weights", members.len())?,
        combiner_bias: f.scalar("bias")?,
    };
    Ok(FusionFile { model, members })
}

/// Reads a fusion file and its members, rejecting members whose contents
/// changed since the fusion file was written.
pub fn read_fusion(path: &Path) -> Result<(FusionFile, Vec<HeadModel>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file = parse_fusion(&text, path)?;
    let mut heads = Vec::with_capacity(file.members.len());
    for (i, m) in file.members.iter().enumerate() {
        let p = file.member_path(i, path);
        let actual = sha256_file(&p)?;
        if actual != m.digest {
            return Err(Error::StaleMember {
                path: p,
                expected: m.digest.clone(),
                actual,
            });
        }
        heads.push(read_head_model(&p)?);
    }
    Ok((file, heads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randomized(config: HeadConfig, with_bias: bool, seed: u64) -> HeadModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut head = PredictorHead::initial(config, 0.0).unwrap();
        head.weights
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-1.0..1.0));
        head.bias = rng.random_range(1.0..5.0);
        if let Some(n) = &mut head.norm {
            n.scale
                .iter_mut()
                .for_each(|w| *w = rng.random_range(0.5..1.5));
            n.offset
                .iter_mut()
                .for_each(|w| *w = rng.random::<f32>() * 1e-7);
        }
        let bias = with_bias.then(|| {
            let mut b = BiasBranch::zeros(head.config.feature_dim(), 4.0, 2.0).unwrap();
            b.add_weights
                .iter_mut()
                .for_each(|w| *w = rng.random_range(-1.0..1.0));
            b.sub_bias = rng.random_range(-1.0..1.0);
            b
        });
        HeadModel::new(head, bias).unwrap()
    }

    fn configs() -> Vec<HeadConfig> {
        vec![
            HeadConfig::plain(5),
            HeadConfig::compressed_pitch(3),
            HeadConfig::pitch_histogram(4, true),
            HeadConfig::pitch_histogram(4, false),
            HeadConfig::spectrum(3, 6, 2).with_seed(11),
        ]
    }

    #[test]
    fn head_round_trip_is_exact() {
        for (i, c) in configs().into_iter().enumerate() {
            for with_bias in [false, true] {
                let m = randomized(c.clone(), with_bias, i as u64);
                let text = head_model_to_string(&m);
                let back = parse_head_model(&text, Path::new("m.txt")).unwrap();
                assert_eq!(back, m);
                assert_eq!(head_model_to_string(&back), text);
            }
        }
    }

    #[test]
    fn head_file_layout() {
        let mut head = PredictorHead::initial(HeadConfig::plain(2), 3.25).unwrap();
        head.weights = vec![0.5, -1.0];
        let text = head_model_to_string(&HeadModel::new(head, None).unwrap());
        assert_eq!(
            text,
            "singqa-head 1\nvariant plain\nembedding_dim 2\naux_dim 0\nraw_aux_dim 0\n\
             layer_norm false\nhistogram_norm voiced\nseed 0\nweights 5e-1 -1e0\nbias 3.25e0\n"
        );
    }

    #[test]
    fn malformed_head_files() {
        let good = head_model_to_string(&randomized(HeadConfig::plain(2), true, 3));
        let p = Path::new("x");
        let cases = [
            good.replacen("singqa-head 1", "singqa-head 9", 1),
            good.replacen("singqa-head", "singqa-fusion", 1),
            good.replacen("variant plain", "variant conformer", 1),
            good.replacen("embedding_dim 2", "embedding_dim 3", 1),
            good.replacen("bias_branch 1", "bias_branch 2", 1),
            good.replacen("alpha 4.0", "alpha 1.5", 1),
            good.replacen("seed 0", "seed 0\nseed 1", 1),
            good.replacen("seed 0", "colour blue", 1),
            good.lines()
                .filter(|l| !l.starts_with("bias "))
                .collect::<Vec<_>>()
                .join("\n"),
            String::new(),
        ];
        for (i, text) in cases.iter().enumerate() {
            assert!(
                matches!(parse_head_model(text, p), Err(Error::ModelFormat { .. })),
                "case {i} parsed"
            );
        }
    }

    #[test]
    fn fusion_round_trip_and_staleness() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = Vec::new();
        for (i, c) in configs().into_iter().take(2).enumerate() {
            let p = dir.path().join(format!("m{i}.model"));
            write_head_model(&randomized(c, false, i as u64), &p).unwrap();
            paths.push(p);
        }
        let model = FusionModel {
            member_ids: vec!["m0".into(), "m1".into()],
            combiner_weights: vec![0.75, 0.3],
            combiner_bias: -0.125,
        };
        let fpath = dir.path().join("fused.fusion");
        write_fusion_file(&model, &paths, &fpath).unwrap();
        let text = fs::read_to_string(&fpath).unwrap();
        assert!(text.contains(" m0.model\n"));

        let (file, heads) = read_fusion(&fpath).unwrap();
        assert_eq!(file.model, model);
        assert_eq!(heads.len(), 2);
        assert_eq!(heads[1], read_head_model(&paths[1]).unwrap());

        write_head_model(&randomized(HeadConfig::plain(5), false, 99), &paths[0]).unwrap();
        assert!(matches!(
            read_fusion(&fpath),
            Err(Error::StaleMember { .. })
        ));

        let bad_ids = FusionModel {
            member_ids: vec!["a b".into(), "c".into()],
            ..model
        };
        assert!(write_fusion_file(&bad_ids, &paths, &fpath).is_err());
    }

    #[test]
    fn malformed_fusion_files() {
        let p = Path::new("f");
        let digest = "0".repeat(64);
        let good = format!("singqa-fusion 1\nmember a {digest} a.model\nweights 1e0\nbias 0e0\n");
        assert!(parse_fusion(&good, p).is_ok());
        for text in [
            good.replace("weights 1e0", "weights 1e0 2e0"),
            good.replace(&digest, "abc"),
            "singqa-fusion 1\nweights 1e0\nbias 0e0\n".to_string(),
            good.replace("bias 0e0", "bias nan"),
        ] {
            assert!(
                matches!(parse_fusion(&text, p), Err(Error::ModelFormat { .. })),
                "{text}"
            );
        }
    }
}
