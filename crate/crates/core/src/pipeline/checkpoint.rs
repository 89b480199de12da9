//! Binary checkpoints: `CILP`, u32 version, u32-length JSON header, then
//! named little-endian f32 blobs (u32 name length, name, u32 rank, u64 dims,
//! payload).

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::ByteReader;
use super::train::{RunConfig, TrainedModel};
use crate::correction::{
    CandidateGenerator, Corrector, EnsembleState, ErrorWeights, GeneratorParams, MemberParams,
};
use crate::error::{Error, Result};
use crate::numeric::Tensor;
use crate::params::Params;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CILP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Non-parameter corrector state, kept at full precision in the header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorrectorMeta {
    members: usize,
    output_scales: Vec<f64>,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    age_center: f64,
    age_spread: f64,
    steps: u64,
    disagreement: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    corrector: Option<CorrectorMeta>,
    has_generator: bool,
}

fn push_blob(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn collect(prefix: &str, p: &dyn Params, blobs: &mut Vec<(String, Tensor)>) {
    p.visit(prefix, &mut |name, t| blobs.push((name, t.clone())));
}

/// Every stored tensor with its name, in file order.
pub fn checkpoint_blobs(tm: &TrainedModel) -> Vec<(String, Tensor)> {
    let mut blobs = Vec::new();
    collect("model", &tm.model, &mut blobs);
    if let Some(c) = &tm.corrector {
        collect("corrector.ensemble", &c.ensemble, &mut blobs);
        collect("corrector.weights", &c.weights, &mut blobs);
    }
    if let Some(g) = &tm.generator {
        collect("generator", &g.params, &mut blobs);
    }
    blobs
}

pub fn encode_checkpoint(tm: &TrainedModel) -> Vec<u8> {
    let header = Header {
        config: tm.config.clone(),
        corrector: tm.corrector.as_ref().map(|c| CorrectorMeta {
            members: c.ensemble.len(),
            output_scales: c.ensemble.output_scales.clone(),
            feature_mean: c.ensemble.feature_mean.clone(),
            feature_std: c.ensemble.feature_std.clone(),
            age_center: c.ensemble.age_center,
            age_spread: c.ensemble.age_spread,
            steps: c.ensemble.steps,
            disagreement: c.disagreement,
        }),
        has_generator: tm.generator.is_some(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let blobs = checkpoint_blobs(tm);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, t) in &blobs {
        push_blob(&mut out, name, t);
    }
    out
}

fn take_prefixed(blobs: &mut HashMap<String, Tensor>, prefix: &str) -> HashMap<String, Tensor> {
    let keys: Vec<String> = blobs
        .keys()
        .filter(|k| k.starts_with(prefix))
        .cloned()
        .collect();
    keys.into_iter()
        .map(|k| {
            let v = blobs.remove(&k).expect("listed key");
            (k[prefix.len()..].to_string(), v)
        })
        .collect()
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainedModel> {
    let mut r = ByteReader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::UnsupportedFormat(format!(
            "expected CILP magic, found {magic:?}"
        )));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let header_at = r.pos;
    let len = r.u32("header length")? as usize;
    let header: Header =
        serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Corrupt {
            offset: header_at as u64,
            detail: format!("header: {e}"),
        })?;
    header.config.validate()?;
    let count = r.u32("blob count")? as usize;
    let mut blobs = HashMap::with_capacity(count);
    for i in 0..count {
        let at = r.pos;
        let n = r.u32("blob name length")? as usize;
        let name = std::str::from_utf8(r.take(n, "blob name")?)
            .map_err(|_| Error::Corrupt {
                offset: at as u64,
                detail: format!("blob {i} name is not UTF-8"),
            })?
            .to_string();
        let t = r.tensor(&name)?;
        if blobs.insert(name.clone(), t).is_some() {
            return Err(Error::Corrupt {
                offset: at as u64,
                detail: format!("duplicate blob `{name}`"),
            });
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Corrupt {
            offset: r.pos as u64,
            detail: format!("{} trailing bytes", r.remaining()),
        });
    }

    let mut tm = TrainedModel::init(header.config)?;
    tm.model.load_named(&take_prefixed(&mut blobs, "model."))?;
    if let Some(meta) = header.corrector {
        let ens_blobs = take_prefixed(&mut blobs, "corrector.ensemble.");
        let k = meta.output_scales.len();
        let first = ens_blobs
            .get("0.w1")
            .ok_or_else(|| Error::Data("checkpoint lacks corrector member 0".into()))?;
        let (inputs, hidden) = (first.shape()[0], first.shape().get(1).copied().unwrap_or(0));
        let members = vec![MemberParams::zeros(inputs, hidden, k); meta.members];
        let mut ensemble = EnsembleState::new(members, meta.output_scales)?;
        ensemble.load_named(&ens_blobs)?;
        if meta.feature_mean.len() != inputs - 1 || meta.feature_std.len() != inputs - 1 {
            return Err(Error::Data(
                "corrector normalization does not match member width".into(),
            ));
        }
        ensemble.feature_mean = meta.feature_mean;
        ensemble.feature_std = meta.feature_std;
        ensemble.age_center = meta.age_center;
        ensemble.age_spread = meta.age_spread;
        ensemble.steps = meta.steps;
        let h = k + meta.disagreement as usize;
        let mut weights = ErrorWeights::uniform(h);
        weights.load_named(&take_prefixed(&mut blobs, "corrector.weights."))?;
        tm.corrector = Some(Corrector::new(ensemble, weights, meta.disagreement)?);
    }
    if header.has_generator {
        let cfg = tm.config.correction.generator.clone();
        let g = take_prefixed(&mut blobs, "generator.");
        let w1 = g
            .get("w1")
            .ok_or_else(|| Error::Data("checkpoint lacks generator weights".into()))?;
        let dim = w1.shape()[0] - cfg.latent;
        let mut params = GeneratorParams {
            w1: Tensor::zeros(&[dim + cfg.latent, cfg.hidden]),
            b1: Tensor::zeros(&[cfg.hidden]),
            w2: Tensor::zeros(&[cfg.hidden, 2]),
            b2: Tensor::zeros(&[2]),
        };
        params.load_named(&g)?;
        tm.generator = Some(CandidateGenerator {
            params,
            config: cfg,
        });
    }
    if let Some(extra) = blobs.keys().next() {
        return Err(Error::Data(format!(
            "unexpected blob `{extra}` in checkpoint"
        )));
    }
    Ok(tm)
}

pub fn save_checkpoint(path: &Path, tm: &TrainedModel) -> Result<()> {
    fs::write(path, encode_checkpoint(tm)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::ErrorCategory;
    use crate::pipeline::dataset::synthesize;
    use crate::pipeline::train::{fit_correction, train_model};

    fn trained() -> (TrainedModel, crate::pipeline::dataset::Dataset) {
        let mut cfg = RunConfig::default();
        cfg.epochs = 1;
        cfg.fpe.channels = 8;
        cfg.alignment.dim = 8;
        cfg.alignment.image_size = 16;
        cfg.alignment.age_step = 10.0;
        cfg.correction.members = 2;
        cfg.correction.training.steps = 10;
        cfg.correction.weight_steps = 5;
        let ds = synthesize(8, 30, 16).unwrap();
        let (mut tm, _) = train_model(&cfg, &ds).unwrap();
        fit_correction(&mut tm, &ds).unwrap();
        (tm, ds)
    }

    #[test]
    fn round_trip_is_bit_exact_and_prediction_identical() {
        let (tm, ds) = trained();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cilp");
        save_checkpoint(&path, &tm).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(back == tm, "checkpoint round trip changed the model");
        for ((na, a), (nb, b)) in checkpoint_blobs(&tm)
            .iter()
            .zip(checkpoint_blobs(&back).iter())
        {
            assert_eq!(na, nb);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b), "{na}");
        }
        assert_eq!(encode_checkpoint(&back), fs::read(&path).unwrap());
        let probe: Vec<usize> = (0..8).collect();
        let a = tm.evaluate(&ds, &probe, true).unwrap();
        let b = back.evaluate(&ds, &probe, true).unwrap();
        assert_eq!(a.predictions, b.predictions);
        assert_eq!(a.base, b.base);
    }

    #[test]
    fn rejects_damaged_files() {
        let (tm, _) = trained();
        let bytes = encode_checkpoint(&tm);

        let mut v = bytes.clone();
        v[4..8].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
        let e = decode_checkpoint(&v).unwrap_err();
        assert!(matches!(
            e,
            Error::UnsupportedVersion {
                found: 2,
                expected: 1
            }
        ));
        assert_eq!(e.category(), ErrorCategory::Data);

        let mut v = bytes.clone();
        v[..4].copy_from_slice(b"NOPE");
        assert!(matches!(
            decode_checkpoint(&v),
            Err(Error::UnsupportedFormat(_))
        ));

        let cut = bytes.len() - 10;
        match decode_checkpoint(&bytes[..cut]) {
            Err(Error::Corrupt { offset, .. }) => assert!(offset as usize <= cut && offset > 12),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_checkpoint(&bytes[..6]),
            Err(Error::Corrupt { offset: 4, .. })
        ));
    }
}
