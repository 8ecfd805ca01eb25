//! On-disk formats.
//!
//! Every JSON document carries a `version` string (`"<major>.<minor>"`);
//! readers reject an unknown major. Writers may stamp a `manifestHash`
//! identifying the run that produced the file. Large tensors of a trace go to
//! a sidecar of little-endian `f64`s, row-major, referenced from the JSON by
//! file name (resolved next to the JSON), shape and element offset.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attn::{BlockSet, LayerKvCache, TopKSet};
use crate::engine::{DecodeRunResult, FidelityReport, Granularity, ReuseExtras, StepCounters};
use crate::error::{Error, Result};
use crate::policy::{LayerAction, LayerPolicy, PlannedPolicy};
use crate::profile::{SensitivityReport, SimilarityMatrix};
use crate::synth::{DecodeStream, DecodeTrace, LayerRecord, SynthModelConfig, TraceStep};

pub const FORMAT_MAJOR: u32 = 1;
pub const FORMAT_VERSION: &str = "1.0";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn check_version(kind: &'static str, version: &str) -> Result<()> {
    let major = version.split('.').next().and_then(|m| m.parse::<u32>().ok());
    if major != Some(FORMAT_MAJOR) {
        return Err(Error::UnsupportedVersion {
            kind,
            found: version.to_string(),
            expected: FORMAT_MAJOR,
        });
    }
    Ok(())
}

/// Serializes `doc` (optionally stamped with `manifestHash`) as pretty JSON.
pub fn to_json_bytes(doc: &impl Serialize, manifest: Option<&str>) -> Result<Vec<u8>> {
    let mut value = serde_json::to_value(doc).map_err(|e| Error::Invariant(e.to_string()))?;
    if let (Some(hash), Some(map)) = (manifest, value.as_object_mut()) {
        map.insert("manifestHash".into(), serde_json::Value::String(hash.to_string()));
    }
    let mut bytes = serde_json::to_vec_pretty(&value).map_err(|e| Error::Invariant(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_doc<T: DeserializeOwned>(path: &Path, kind: &'static str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        kind,
        detail: e.to_string(),
    })?;
    let version = value
        .get("version")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Format {
            kind,
            detail: "missing version field".into(),
        })?;
    check_version(kind, version)?;
    serde_json::from_value(value).map_err(|e| Error::Format {
        kind,
        detail: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Trace

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct TraceDoc {
    version: String,
    config: SynthModelConfig,
    budget: usize,
    block_size: usize,
    block_budget: usize,
    steps: Vec<TraceStepDoc>,
    tensors: TensorIndex,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceStepDoc {
    layer: Vec<TraceLayerDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceLayerDoc {
    topk: Vec<usize>,
    blocks: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorIndex {
    pub path: String,
    pub encoding: String,
    pub entries: Vec<TensorEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in elements from the start of the sidecar.
    pub offset: usize,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A trace read back from disk, with the grown caches when they were stored.
#[derive(Debug, Clone)]
pub struct LoadedTrace {
    pub trace: DecodeTrace,
    /// `[layer][head]`.
    pub caches: Option<Vec<Vec<LayerKvCache>>>,
}

fn sidecar_path(json: &Path) -> PathBuf {
    json.with_extension("bin")
}

/// Serialized trace: the JSON document and its sidecar bytes.
pub fn encode_trace(
    json_path: &Path,
    trace: &DecodeTrace,
    stream: Option<&DecodeStream>,
    manifest: Option<&str>,
) -> Result<(Vec<u8>, Vec<u8>)> {
    let cfg = &trace.config;
    let width = cfg.model_dim();
    let steps = trace.step_count();
    let mut data: Vec<f64> = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, values: &mut dyn Iterator<Item = f64>, data: &mut Vec<f64>| {
        let offset = data.len();
        data.extend(values);
        entries.push(TensorEntry {
            name: name.into(),
            shape,
            offset,
        });
    };
    let records = || trace.steps.iter().flat_map(|s| s.layers.iter());
    push(
        "queries",
        vec![steps, cfg.layers, width],
        &mut records().flat_map(|r| r.query.iter().copied()),
        &mut data,
    );
    push(
        "outputs",
        vec![steps, cfg.layers, width],
        &mut records().flat_map(|r| r.output.iter().copied()),
        &mut data,
    );
    if let Some(stream) = stream {
        let rows = stream.grown_cache(0, 0).len();
        let shape = vec![cfg.layers, cfg.heads, rows, cfg.head_dim];
        let caches = || (0..cfg.layers).flat_map(|l| (0..cfg.heads).map(move |h| (l, h)));
        push(
            "keys",
            shape.clone(),
            &mut caches().flat_map(|(l, h)| stream.grown_cache(l, h).keys().iter().copied()),
            &mut data,
        );
        push(
            "values",
            shape,
            &mut caches().flat_map(|(l, h)| stream.grown_cache(l, h).values().iter().copied()),
            &mut data,
        );
    }
    let sidecar_name = sidecar_path(json_path)
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| Error::InvalidInput("trace path has no file name".into()))?;
    let doc = TraceDoc {
        version: FORMAT_VERSION.into(),
        config: cfg.clone(),
        budget: trace.budget,
        block_size: trace.block_size,
        block_budget: trace.block_budget,
        steps: trace
            .steps
            .iter()
            .map(|s| TraceStepDoc {
                layer: s
                    .layers
                    .iter()
                    .map(|r| TraceLayerDoc {
                        topk: r.topk.indices().to_vec(),
                        blocks: r.blocks.blocks().to_vec(),
                    })
                    .collect(),
            })
            .collect(),
        tensors: TensorIndex {
            path: sidecar_name,
            encoding: "f64-le".into(),
            entries,
        },
    };
    let json = to_json_bytes(&doc, manifest)?;
    let bin = data.iter().flat_map(|x| x.to_le_bytes()).collect();
    Ok((json, bin))
}

/// Writes `<name>.json` plus the `<name>.bin` sidecar.
pub fn write_trace(
    json_path: &Path,
    trace: &DecodeTrace,
    stream: Option<&DecodeStream>,
    manifest: Option<&str>,
) -> Result<()> {
    let (json, bin) = encode_trace(json_path, trace, stream, manifest)?;
    write_bytes(&sidecar_path(json_path), &bin)?;
    write_bytes(json_path, &json)
}

fn trace_format(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: "trace",
        detail: detail.into(),
    }
}

pub fn read_trace(json_path: &Path) -> Result<LoadedTrace> {
    let doc: TraceDoc = read_doc(json_path, "trace")?;
    doc.config.validate()?;
    let cfg = &doc.config;
    if doc.steps.is_empty() {
        return Err(Error::InvalidInput("trace has no decode steps".into()));
    }
    if doc.tensors.encoding != "f64-le" {
        return Err(trace_format(format!("unknown encoding {}", doc.tensors.encoding)));
    }
    let dir = json_path.parent().unwrap_or(Path::new(""));
    let bin_path = dir.join(&doc.tensors.path);
    let bytes = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(trace_format("sidecar length is not a multiple of 8"));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let tensor = |name: &str| -> Result<Option<(&TensorEntry, &[f64])>> {
        let Some(e) = doc.tensors.entries.iter().find(|e| e.name == name) else {
            return Ok(None);
        };
        let end = e.offset + e.len();
        if end > data.len() {
            return Err(trace_format(format!("tensor {name} runs past the sidecar")));
        }
        Ok(Some((e, &data[e.offset..end])))
    };
    let steps = doc.steps.len();
    let width = cfg.model_dim();
    let expect_shape = vec![steps, cfg.layers, width];
    let (qe, queries) = tensor("queries")?.ok_or_else(|| trace_format("missing queries tensor"))?;
    let (oe, outputs) = tensor("outputs")?.ok_or_else(|| trace_format("missing outputs tensor"))?;
    if qe.shape != expect_shape || oe.shape != expect_shape {
        return Err(trace_format("query/output tensor shape mismatch"));
    }

    let mut out_steps = Vec::with_capacity(steps);
    for (t, step) in doc.steps.iter().enumerate() {
        if step.layer.len() != cfg.layers {
            return Err(Error::InvalidInput(format!("step {t} does not cover all layers")));
        }
        let layers = step
            .layer
            .iter()
            .enumerate()
            .map(|(l, rec)| {
                let at = (t * cfg.layers + l) * width;
                Ok(LayerRecord {
                    query: queries[at..at + width].to_vec(),
                    output: outputs[at..at + width].to_vec(),
                    topk: TopKSet::new(rec.topk.clone(), doc.budget)?,
                    blocks: BlockSet::new(rec.blocks.clone(), doc.block_size)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out_steps.push(TraceStep { layers });
    }

    let caches = match (tensor("keys")?, tensor("values")?) {
        (Some((ke, keys)), Some((ve, values))) => {
            if ke.shape != ve.shape || ke.shape.len() != 4 || ke.shape[..2] != [cfg.layers, cfg.heads] || ke.shape[3] != cfg.head_dim {
                return Err(trace_format("cache tensor shape mismatch"));
            }
            let per = ke.shape[2] * cfg.head_dim;
            let mut layers = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let mut heads = Vec::with_capacity(cfg.heads);
                for h in 0..cfg.heads {
                    let at = (l * cfg.heads + h) * per;
                    heads.push(LayerKvCache::new(
                        keys[at..at + per].to_vec(),
                        values[at..at + per].to_vec(),
                        cfg.head_dim,
                    )?);
                }
                layers.push(heads);
            }
            Some(layers)
        }
        (None, None) => None,
        _ => return Err(trace_format("keys and values must be stored together")),
    };

    Ok(LoadedTrace {
        trace: DecodeTrace {
            config: doc.config,
            budget: doc.budget,
            block_size: doc.block_size,
            block_budget: doc.block_budget,
            steps: out_steps,
        },
        caches,
    })
}

// ---------------------------------------------------------------------------
// Similarity matrix

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct MatrixDoc {
    version: String,
    #[serde(rename = "L")]
    layers: usize,
    k: usize,
    /// Row-major lower triangle: row `j` (target), columns `0..=j` (source).
    entries: Vec<f64>,
    matrix_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixFile {
    pub matrix: SimilarityMatrix,
    pub k: usize,
}

pub fn encode_matrix(m: &SimilarityMatrix, k: usize, manifest: Option<&str>) -> Result<Vec<u8>> {
    to_json_bytes(
        &MatrixDoc {
            version: FORMAT_VERSION.into(),
            layers: m.layers(),
            k,
            entries: m.packed().to_vec(),
            matrix_hash: m.content_hash(),
        },
        manifest,
    )
}

pub fn read_matrix(path: &Path) -> Result<MatrixFile> {
    let doc: MatrixDoc = read_doc(path, "similarity matrix")?;
    let matrix = SimilarityMatrix::from_packed(doc.layers, doc.entries)?;
    Ok(MatrixFile { matrix, k: doc.k })
}

/// `j,i,value` rows for every lower-triangle entry, with a header line.
pub fn matrix_heatmap_csv(m: &SimilarityMatrix) -> String {
    let mut out = String::from("j,i,value\n");
    for j in 0..m.layers() {
        for i in 0..=j {
            out.push_str(&format!("{j},{i},{}\n", m.get(i, j)));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Policy

#[derive(Debug, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
struct PolicyDoc {
    version: String,
    #[serde(rename = "L")]
    layers: usize,
    theta: Option<f64>,
    actions: Vec<LayerAction>,
    sources: Vec<Option<usize>>,
    full_count: usize,
    cum_similarity: Option<f64>,
    matrix_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyFile {
    pub policy: LayerPolicy,
    pub cum_similarity: Option<f64>,
}

impl PolicyFile {
    pub fn planned(p: &PlannedPolicy) -> Self {
        Self {
            policy: p.policy.clone(),
            cum_similarity: Some(p.cum_similarity),
        }
    }

    fn doc(&self) -> PolicyDoc {
        PolicyDoc {
            version: FORMAT_VERSION.into(),
            layers: self.policy.layers(),
            theta: self.policy.theta,
            actions: self.policy.actions.clone(),
            sources: self.policy.sources.clone(),
            full_count: self.policy.full_count(),
            cum_similarity: self.cum_similarity,
            matrix_hash: self.policy.matrix_hash.clone(),
        }
    }

    /// Hash of the canonical (unstamped) policy document.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(&to_json_bytes(&self.doc(), None)?))
    }

    pub fn encode(&self, manifest: Option<&str>) -> Result<Vec<u8>> {
        to_json_bytes(&self.doc(), manifest)
    }
}

pub fn read_policy(path: &Path) -> Result<PolicyFile> {
    let doc: PolicyDoc = read_doc(path, "policy")?;
    if doc.actions.len() != doc.layers || doc.sources.len() != doc.layers {
        return Err(Error::Format {
            kind: "policy",
            detail: "actions/sources length differs from L".into(),
        });
    }
    let policy = LayerPolicy {
        actions: doc.actions,
        sources: doc.sources,
        theta: doc.theta,
        matrix_hash: doc.matrix_hash,
    };
    if policy.full_count() != doc.full_count {
        return Err(Error::Format {
            kind: "policy",
            detail: "fullCount disagrees with actions".into(),
        });
    }
    Ok(PolicyFile {
        policy,
        cum_similarity: doc.cum_similarity,
    })
}

// ---------------------------------------------------------------------------
// Sensitivity report

#[derive(Debug, Serialize, Deserialize)]
struct SensitivityDoc {
    version: String,
    #[serde(flatten)]
    report: SensitivityReport,
}

pub fn encode_sensitivity(report: &SensitivityReport, manifest: Option<&str>) -> Result<Vec<u8>> {
    to_json_bytes(
        &SensitivityDoc {
            version: FORMAT_VERSION.into(),
            report: report.clone(),
        },
        manifest,
    )
}

pub fn read_sensitivity(path: &Path) -> Result<SensitivityReport> {
    read_doc::<SensitivityDoc>(path, "sensitivity report").map(|d| d.report)
}

// ---------------------------------------------------------------------------
// Decode run

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RunDoc {
    pub version: String,
    pub policy_hash: String,
    pub theta: Option<f64>,
    pub granularity: Granularity,
    pub extras: ReuseExtras,
    pub steps: usize,
    pub full_layer_count: usize,
    pub reuse_layer_count: usize,
    pub counters: Vec<StepCounters>,
    pub fidelity: FidelityReport,
}

impl RunDoc {
    pub fn new(run: &DecodeRunResult, policy: &PolicyFile, fidelity: FidelityReport) -> Result<Self> {
        Ok(Self {
            version: FORMAT_VERSION.into(),
            policy_hash: policy.content_hash()?,
            theta: policy.policy.theta,
            granularity: run.granularity,
            extras: run.extras,
            steps: run.steps(),
            full_layer_count: run.full_layer_count,
            reuse_layer_count: run.reuse_layer_count,
            counters: run.counters.clone(),
            fidelity,
        })
    }
}

pub fn read_run(path: &Path) -> Result<RunDoc> {
    read_doc(path, "run result")
}

/// Per-layer `layer,mean_rnmse,mean_overlap` table.
pub fn fidelity_csv(f: &FidelityReport) -> String {
    let mut out = String::from("layer,mean_rnmse,mean_overlap\n");
    for (l, (r, o)) in f.layer_mean_rnmse.iter().zip(&f.layer_mean_overlap).enumerate() {
        out.push_str(&format!("{l},{r},{o}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_model, run_full_trace_on};

    #[test]
    fn version_gate() {
        assert!(check_version("x", "1.0").is_ok());
        assert!(check_version("x", "1.7").is_ok());
        assert!(check_version("x", "2.0").is_err());
        assert!(check_version("x", "abc").is_err());
    }

    #[test]
    fn trace_round_trip_with_caches() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthModelConfig { layers: 3, head_dim: 4, context_len: 16, seed: 2, rho: 0.6, heads: 2, ..Default::default() };
        let stream = generate_model(&cfg).unwrap().unroll(2).unwrap();
        let trace = run_full_trace_on(&stream, 4, 4).unwrap();
        let path = dir.path().join("t.json");
        write_trace(&path, &trace, Some(&stream), Some("abc")).unwrap();
        let loaded = read_trace(&path).unwrap();
        assert_eq!(loaded.trace, trace);
        let caches = loaded.caches.unwrap();
        assert_eq!(&caches[2][1], stream.grown_cache(2, 1));
        let raw: serde_json::Value = serde_json::from_slice(&fs::read(&path).unwrap()).unwrap();
        assert_eq!(raw["manifestHash"], "abc");
        assert_eq!(raw["steps"][1]["layer"][2]["topk"].as_array().unwrap().len(), 4);
    }

    #[test]
    fn unknown_major_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let m = SimilarityMatrix::from_fn(2, |_, _| 0.5).unwrap();
        let text = String::from_utf8(encode_matrix(&m, 4, None).unwrap()).unwrap();
        let path = dir.path().join("m.json");
        fs::write(&path, text.replace("\"1.0\"", "\"2.0\"")).unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::UnsupportedVersion { .. })));
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(read_matrix(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn heatmap_has_triangle_rows() {
        let m = SimilarityMatrix::from_fn(4, |_, _| 0.25).unwrap();
        let csv = matrix_heatmap_csv(&m);
        assert_eq!(csv.lines().count(), 1 + 4 * 5 / 2);
        assert!(csv.contains("\n3,1,0.25\n"));
    }
}
