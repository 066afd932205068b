//! Versioned binary model container.
//!
//! One self-describing file holds everything prediction needs: grid values,
//! every logit, the σ² grid and prior, feature-map parameters, and the input
//! standardizer. All floats are written as little-endian `f64` bits, so a
//! write → read → write cycle is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::bnn::BnnArch;
use crate::error::{DirectError, Result};
use crate::features::{RffMap, Standardizer};
use crate::glm::NoiseModel;
use crate::variational::{MeanFieldDist, MixtureDist, SupportGrid, VariationalDist};

const MAGIC: &[u8; 4] = b"DRCT";
const VERSION: u8 = 1;

const TAG_GLM: u8 = 0;
const TAG_LOGISTIC: u8 = 1;
const TAG_BNN: u8 = 2;

const DIST_MEAN_FIELD: u8 = 0;
const DIST_MIXTURE: u8 = 1;

/// Trained regression model.
#[derive(Debug, Clone, PartialEq)]
pub struct GlmArtifact {
    pub grid: SupportGrid,
    pub q: VariationalDist,
    pub prior: VariationalDist,
    pub noise: NoiseModel,
    pub feature_map: Option<RffMap>,
    pub standardizer: Option<Standardizer>,
}

/// Trained classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticArtifact {
    pub grid: SupportGrid,
    pub q: MeanFieldDist,
    pub prior: MeanFieldDist,
    pub feature_map: Option<RffMap>,
    pub standardizer: Option<Standardizer>,
}

/// Trained network model.
#[derive(Debug, Clone, PartialEq)]
pub struct BnnArtifact {
    pub arch: BnnArch,
    pub grid: SupportGrid,
    pub q: MeanFieldDist,
    pub prior: MeanFieldDist,
    pub noise: NoiseModel,
    pub standardizer: Option<Standardizer>,
}

/// Any trained model, tagged by kind.
#[derive(Debug, Clone, PartialEq)]
pub enum ModelArtifact {
    Glm(GlmArtifact),
    Logistic(LogisticArtifact),
    Bnn(BnnArtifact),
}

impl ModelArtifact {
    pub fn kind(&self) -> &'static str {
        match self {
            ModelArtifact::Glm(_) => "glm",
            ModelArtifact::Logistic(_) => "logistic",
            ModelArtifact::Bnn(_) => "bnn",
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        put_u8(w, VERSION)?;
        match self {
            ModelArtifact::Glm(a) => {
                put_u8(w, TAG_GLM)?;
                put_grid(w, &a.grid)?;
                put_dist(w, &a.q)?;
                put_dist(w, &a.prior)?;
                put_noise(w, &a.noise)?;
                put_opt(w, a.feature_map.as_ref(), put_rff)?;
                put_opt(w, a.standardizer.as_ref(), put_standardizer)?;
            }
            ModelArtifact::Logistic(a) => {
                put_u8(w, TAG_LOGISTIC)?;
                put_grid(w, &a.grid)?;
                put_mean_field(w, &a.q)?;
                put_mean_field(w, &a.prior)?;
                put_opt(w, a.feature_map.as_ref(), put_rff)?;
                put_opt(w, a.standardizer.as_ref(), put_standardizer)?;
            }
            ModelArtifact::Bnn(a) => {
                put_u8(w, TAG_BNN)?;
                put_u32(w, a.arch.input_dim() as u32)?;
                put_u16(w, a.arch.layer_widths().len() as u16)?;
                for &width in a.arch.layer_widths() {
                    put_u32(w, width as u32)?;
                }
                put_grid(w, &a.grid)?;
                put_mean_field(w, &a.q)?;
                put_mean_field(w, &a.prior)?;
                put_noise(w, &a.noise)?;
                put_opt(w, a.standardizer.as_ref(), put_standardizer)?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DirectError::Data("not a model artifact (bad magic)".into()));
        }
        let version = get_u8(r)?;
        if version != VERSION {
            return Err(DirectError::Data(format!("unsupported artifact version {version}")));
        }
        match get_u8(r)? {
            TAG_GLM => Ok(ModelArtifact::Glm(GlmArtifact {
                grid: get_grid(r)?,
                q: get_dist(r)?,
                prior: get_dist(r)?,
                noise: get_noise(r)?,
                feature_map: get_opt(r, get_rff)?,
                standardizer: get_opt(r, get_standardizer)?,
            })),
            TAG_LOGISTIC => Ok(ModelArtifact::Logistic(LogisticArtifact {
                grid: get_grid(r)?,
                q: get_mean_field(r)?,
                prior: get_mean_field(r)?,
                feature_map: get_opt(r, get_rff)?,
                standardizer: get_opt(r, get_standardizer)?,
            })),
            TAG_BNN => {
                let input_dim = get_u32(r)? as usize;
                let n_layers = get_u16(r)? as usize;
                let mut widths = Vec::with_capacity(n_layers);
                for _ in 0..n_layers {
                    widths.push(get_u32(r)? as usize);
                }
                Ok(ModelArtifact::Bnn(BnnArtifact {
                    arch: BnnArch::new(input_dim, widths)?,
                    grid: get_grid(r)?,
                    q: get_mean_field(r)?,
                    prior: get_mean_field(r)?,
                    noise: get_noise(r)?,
                    standardizer: get_opt(r, get_standardizer)?,
                }))
            }
            tag => Err(DirectError::Data(format!("unknown model tag {tag}"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let mut slice = bytes.as_slice();
        let artifact = Self::read_from(&mut slice)?;
        if !slice.is_empty() {
            return Err(DirectError::Data(format!(
                "{} trailing bytes after artifact",
                slice.len()
            )));
        }
        Ok(artifact)
    }
}

// --- primitive encoders -----------------------------------------------------

fn put_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v])?;
    Ok(())
}

fn put_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn put_f64s(w: &mut impl Write, vs: &[f64]) -> Result<()> {
    put_u64(w, vs.len() as u64)?;
    for &v in vs {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_u8(r: &mut impl Read) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b)?;
    Ok(b[0])
}

fn get_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn get_f64s(r: &mut impl Read) -> Result<Vec<f64>> {
    let len = get_u64(r)? as usize;
    if len > (1 << 32) {
        return Err(DirectError::Data(format!("implausible vector length {len}")));
    }
    let mut out = Vec::with_capacity(len);
    let mut b = [0u8; 8];
    for _ in 0..len {
        r.read_exact(&mut b)?;
        out.push(f64::from_le_bytes(b));
    }
    Ok(out)
}

fn put_opt<W: Write, T>(
    w: &mut W,
    value: Option<&T>,
    put: impl Fn(&mut W, &T) -> Result<()>,
) -> Result<()> {
    match value {
        Some(v) => {
            put_u8(w, 1)?;
            put(w, v)
        }
        None => put_u8(w, 0),
    }
}

fn get_opt<R: Read, T>(r: &mut R, get: impl Fn(&mut R) -> Result<T>) -> Result<Option<T>> {
    match get_u8(r)? {
        0 => Ok(None),
        1 => Ok(Some(get(r)?)),
        flag => Err(DirectError::Data(format!("bad option flag {flag}"))),
    }
}

// --- domain encoders ---------------------------------------------------------

fn put_grid(w: &mut impl Write, grid: &SupportGrid) -> Result<()> {
    put_u32(w, grid.b() as u32)?;
    put_u16(w, grid.m_bar() as u16)?;
    for row in grid.rows() {
        for &v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_grid(r: &mut impl Read) -> Result<SupportGrid> {
    let b = get_u32(r)? as usize;
    let m = get_u16(r)? as usize;
    let mut rows = Vec::with_capacity(b);
    let mut buf = [0u8; 8];
    for _ in 0..b {
        let mut row = Vec::with_capacity(m);
        for _ in 0..m {
            r.read_exact(&mut buf)?;
            row.push(f64::from_le_bytes(buf));
        }
        rows.push(row);
    }
    SupportGrid::new(rows)
}

fn put_mean_field(w: &mut impl Write, dist: &MeanFieldDist) -> Result<()> {
    put_u32(w, dist.b() as u32)?;
    put_u16(w, dist.m_bar() as u16)?;
    for row in dist.logits() {
        for &v in row {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_mean_field(r: &mut impl Read) -> Result<MeanFieldDist> {
    let b = get_u32(r)? as usize;
    let m = get_u16(r)? as usize;
    let mut rows = Vec::with_capacity(b);
    let mut buf = [0u8; 8];
    for _ in 0..b {
        let mut row = Vec::with_capacity(m);
        for _ in 0..m {
            r.read_exact(&mut buf)?;
            row.push(f64::from_le_bytes(buf));
        }
        rows.push(row);
    }
    MeanFieldDist::from_logits(rows)
}

fn put_dist(w: &mut impl Write, dist: &VariationalDist) -> Result<()> {
    match dist {
        VariationalDist::MeanField(d) => {
            put_u8(w, DIST_MEAN_FIELD)?;
            put_mean_field(w, d)
        }
        VariationalDist::Mixture(d) => {
            put_u8(w, DIST_MIXTURE)?;
            put_u16(w, d.r() as u16)?;
            put_f64s(w, d.mixture_logits())?;
            for comp in d.components() {
                put_mean_field(w, comp)?;
            }
            Ok(())
        }
    }
}

fn get_dist(r: &mut impl Read) -> Result<VariationalDist> {
    match get_u8(r)? {
        DIST_MEAN_FIELD => Ok(VariationalDist::MeanField(get_mean_field(r)?)),
        DIST_MIXTURE => {
            let rr = get_u16(r)? as usize;
            let mixture_logits = get_f64s(r)?;
            let mut comps = Vec::with_capacity(rr);
            for _ in 0..rr {
                comps.push(get_mean_field(r)?);
            }
            Ok(VariationalDist::Mixture(MixtureDist::new(mixture_logits, comps)?))
        }
        tag => Err(DirectError::Data(format!("unknown distribution tag {tag}"))),
    }
}

fn put_noise(w: &mut impl Write, noise: &NoiseModel) -> Result<()> {
    put_f64s(w, noise.sigma2_values())?;
    put_f64s(w, noise.prior_probs())?;
    put_f64s(w, noise.q_logits())
}

fn get_noise(r: &mut impl Read) -> Result<NoiseModel> {
    let sigma2 = get_f64s(r)?;
    let prior = get_f64s(r)?;
    let q_logits = get_f64s(r)?;
    NoiseModel::new(sigma2, prior, q_logits)
}

fn put_rff(w: &mut impl Write, map: &RffMap) -> Result<()> {
    put_u32(w, map.b() as u32)?;
    put_u32(w, map.d() as u32)?;
    put_f64s(w, &map.lengthscales)?;
    w.write_all(&map.signal_sd.to_le_bytes())?;
    put_u64(w, map.seed)?;
    for &v in map.frequencies.iter() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn get_rff(r: &mut impl Read) -> Result<RffMap> {
    let b = get_u32(r)? as usize;
    let d = get_u32(r)? as usize;
    let lengthscales = get_f64s(r)?;
    if lengthscales.len() != d {
        return Err(DirectError::Data("lengthscale count mismatch".into()));
    }
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    let signal_sd = f64::from_le_bytes(buf);
    let seed = get_u64(r)?;
    let mut frequencies = Array2::zeros((b / 2, d));
    for v in frequencies.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    Ok(RffMap {
        frequencies,
        lengthscales,
        signal_sd,
        seed,
    })
}

fn put_standardizer(w: &mut impl Write, s: &Standardizer) -> Result<()> {
    put_f64s(w, &s.means)?;
    put_f64s(w, &s.sds)
}

fn get_standardizer(r: &mut impl Read) -> Result<Standardizer> {
    let means = get_f64s(r)?;
    let sds = get_f64s(r)?;
    if means.len() != sds.len() {
        return Err(DirectError::Data("standardizer length mismatch".into()));
    }
    Ok(Standardizer { means, sds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeded_rng;
    use rand::Rng;

    fn sample_glm_artifact(mixture: bool) -> ModelArtifact {
        let mut rng = seeded_rng(100);
        let row = crate::features::make_support(1.3, 5).unwrap();
        let grid = SupportGrid::uniform(6, row).unwrap();
        let mf = |rng: &mut crate::SeededRng| {
            MeanFieldDist::from_logits(
                (0..6)
                    .map(|_| (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect())
                    .collect(),
            )
            .unwrap()
        };
        let q = if mixture {
            VariationalDist::Mixture(
                MixtureDist::new(vec![0.4, -0.1, 0.2], vec![mf(&mut rng), mf(&mut rng), mf(&mut rng)])
                    .unwrap(),
            )
        } else {
            VariationalDist::MeanField(mf(&mut rng))
        };
        let map = RffMap::generate(6, &[0.9, 1.7], 1.2, 42).unwrap();
        ModelArtifact::Glm(GlmArtifact {
            grid,
            q,
            prior: VariationalDist::MeanField(mf(&mut rng)),
            noise: NoiseModel::log_uniform(0.25, 4).unwrap(),
            feature_map: Some(map),
            standardizer: Some(Standardizer {
                means: vec![0.1, -2.5],
                sds: vec![1.0, 3.25],
            }),
        })
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        for artifact in [
            sample_glm_artifact(false),
            sample_glm_artifact(true),
            ModelArtifact::Bnn(BnnArtifact {
                arch: BnnArch::new(2, vec![2, 1]).unwrap(),
                grid: SupportGrid::uniform(6, vec![-1.0, 0.0, 1.0]).unwrap(),
                q: MeanFieldDist::uniform(6, 3),
                prior: MeanFieldDist::uniform(6, 3),
                noise: NoiseModel::log_uniform(0.5, 3).unwrap(),
                standardizer: None,
            }),
        ] {
            let mut first = Vec::new();
            artifact.write_to(&mut first).unwrap();
            let back = ModelArtifact::read_from(&mut first.as_slice()).unwrap();
            assert_eq!(back, artifact);
            let mut second = Vec::new();
            back.write_to(&mut second).unwrap();
            assert_eq!(first, second, "second serialization differs");
        }
    }

    #[test]
    fn logistic_roundtrip() {
        let artifact = ModelArtifact::Logistic(LogisticArtifact {
            grid: SupportGrid::uniform(4, vec![-2.0, 2.0]).unwrap(),
            q: MeanFieldDist::uniform(4, 2),
            prior: MeanFieldDist::uniform(4, 2),
            feature_map: None,
            standardizer: Some(Standardizer {
                means: vec![1.0],
                sds: vec![2.0],
            }),
        });
        let mut buf = Vec::new();
        artifact.write_to(&mut buf).unwrap();
        let back = ModelArtifact::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, artifact);
        assert_eq!(back.kind(), "logistic");
    }

    #[test]
    fn corrupted_inputs_are_rejected() {
        let artifact = sample_glm_artifact(false);
        let mut buf = Vec::new();
        artifact.write_to(&mut buf).unwrap();
        // Wrong magic.
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ModelArtifact::read_from(&mut bad.as_slice()).is_err());
        // Wrong version.
        let mut bad = buf.clone();
        bad[4] = 99;
        assert!(ModelArtifact::read_from(&mut bad.as_slice()).is_err());
        // Truncation.
        let bad = &buf[..buf.len() / 2];
        assert!(ModelArtifact::read_from(&mut &bad[..]).is_err());
    }

    #[test]
    fn save_and_load_via_path() {
        let artifact = sample_glm_artifact(true);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.direct");
        artifact.save(&path).unwrap();
        let back = ModelArtifact::load(&path).unwrap();
        assert_eq!(back, artifact);
    }
}
