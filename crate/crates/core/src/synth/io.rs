//! NDJSON dataset files.
//!
//! Layout, one JSON object per line:
//!
//! 1. `{"record":"manifest","format":"owis-lab.dataset.v1","manifest":{..}}`
//! 2. one `{"record":"sample",..}` per sample, in index order
//! 3. `{"record":"checksum","samples":n,"sha256":".."}`
//!
//! The checksum covers every byte before the checksum line. Features are
//! little-endian `f64` bytes in base64; every other real goes through the
//! shortest round-trip decimal form, so reloading is bit-exact. Instance
//! masks use the column-major RLE of [`crate::mask::RleMask`].

use std::fs;
use std::io::Write;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, DatasetManifest, Sample, ShapeInstance, ShapeKind};
use crate::error::{Error, Result};
use crate::mask::{rle_decode, rle_encode, RleMask};
use crate::model::FeatureGrid;

pub const DATASET_FORMAT: &str = "owis-lab.dataset.v1";

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Manifest {
        format: String,
        manifest: DatasetManifest,
    },
    Sample(SampleRecord),
    Checksum {
        samples: usize,
        sha256: String,
    },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleRecord {
    index: usize,
    seed: u64,
    labeled: bool,
    requested_instances: usize,
    features: FeatureRecord,
    instances: Vec<InstanceRecord>,
    visible: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureRecord {
    height: usize,
    width: usize,
    channels: usize,
    /// base64 of little-endian f64, pixel-major
    data: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceRecord {
    kind: ShapeKind,
    center: (f64, f64),
    scale: f64,
    orientation: f64,
    color: usize,
    mask: RleMask,
}

fn sample_record(s: &Sample) -> SampleRecord {
    let bytes: Vec<u8> = s.features.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    SampleRecord {
        index: s.index,
        seed: s.seed,
        labeled: s.labeled,
        requested_instances: s.requested_instances,
        features: FeatureRecord {
            height: s.features.height,
            width: s.features.width,
            channels: s.features.channels,
            data: B64.encode(bytes),
        },
        instances: s
            .instances
            .iter()
            .map(|i| InstanceRecord {
                kind: i.kind,
                center: i.center,
                scale: i.scale,
                orientation: i.orientation,
                color: i.color,
                mask: rle_encode(&i.mask),
            })
            .collect(),
        visible: s.visible.clone(),
    }
}

fn sample_from_record(r: SampleRecord) -> Result<Sample> {
    let bytes = B64
        .decode(r.features.data.as_bytes())
        .map_err(|e| Error::malformed(format!("sample {}: bad feature payload: {e}", r.index)))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::malformed(format!("sample {}: feature payload not a multiple of 8 bytes", r.index)));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let features = FeatureGrid::new(r.features.height, r.features.width, r.features.channels, data)?;
    let instances = r
        .instances
        .into_iter()
        .map(|i| {
            let mask = rle_decode(&i.mask)?;
            if mask.dims() != (features.height, features.width) {
                return Err(Error::malformed(format!("sample {}: mask size differs from image", r.index)));
            }
            Ok(ShapeInstance {
                kind: i.kind,
                center: i.center,
                scale: i.scale,
                orientation: i.orientation,
                color: i.color,
                mask,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if r.visible.iter().any(|&v| v >= instances.len()) {
        return Err(Error::malformed(format!("sample {}: visible index out of range", r.index)));
    }
    Ok(Sample {
        index: r.index,
        seed: r.seed,
        features,
        instances,
        visible: r.visible,
        labeled: r.labeled,
        requested_instances: r.requested_instances,
    })
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Serializes the dataset to its NDJSON byte form.
pub fn to_bytes(dataset: &Dataset) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let header = Record::Manifest {
        format: DATASET_FORMAT.to_string(),
        manifest: dataset.manifest.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for s in &dataset.samples {
        serde_json::to_writer(&mut out, &Record::Sample(sample_record(s)))?;
        out.push(b'\n');
    }
    let digest = hex(&Sha256::digest(&out));
    serde_json::to_writer(
        &mut out,
        &Record::Checksum {
            samples: dataset.samples.len(),
            sha256: digest,
        },
    )?;
    out.push(b'\n');
    Ok(out)
}

/// Parses the NDJSON byte form. Any truncation or corruption is an error.
pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
    let body_end = match bytes.strip_suffix(b"\n") {
        Some(trimmed) => trimmed.iter().rposition(|&b| b == b'\n').map(|p| p + 1),
        None => None,
    }
    .ok_or_else(|| Error::malformed("dataset file is truncated"))?;
    let (body, tail) = bytes.split_at(body_end);

    let (expected, samples_declared) = match serde_json::from_slice::<Record>(tail.trim_ascii_end()) {
        Ok(Record::Checksum { samples, sha256 }) => (sha256, samples),
        _ => return Err(Error::malformed("dataset file does not end with a checksum record")),
    };
    let computed = hex(&Sha256::digest(body));
    if computed != expected {
        return Err(Error::Checksum { expected, computed });
    }

    let mut lines = body.split(|&b| b == b'\n').filter(|l| !l.is_empty());
    let manifest = match lines.next().map(serde_json::from_slice::<Record>) {
        Some(Ok(Record::Manifest { format, manifest })) => {
            if format != DATASET_FORMAT {
                return Err(Error::malformed(format!("unsupported dataset format {format:?}")));
            }
            manifest
        }
        Some(Err(e)) => return Err(e.into()),
        _ => return Err(Error::malformed("dataset file must start with a manifest record")),
    };
    let mut samples = Vec::new();
    for line in lines {
        match serde_json::from_slice::<Record>(line)? {
            Record::Sample(r) => samples.push(sample_from_record(r)?),
            _ => return Err(Error::malformed("unexpected record between manifest and checksum")),
        }
    }
    if samples.len() != samples_declared {
        return Err(Error::malformed(format!(
            "checksum record declares {samples_declared} samples, found {}",
            samples.len()
        )));
    }
    Ok(Dataset { manifest, samples })
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let bytes = to_bytes(dataset)?;
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    file.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, DropoutPolicy, SceneSpec};

    fn small() -> Dataset {
        generate_dataset(&DatasetManifest {
            seed: 11,
            samples: 6,
            labeled_fraction: 0.5,
            dropout: DropoutPolicy::Fraction { keep: 0.5 },
            sparse_annotations: true,
            scene: SceneSpec {
                height: 32,
                width: 32,
                min_scale: 3.0,
                max_scale: 6.0,
                ..SceneSpec::default()
            },
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        save_dataset(&d, &path).unwrap();
        let back = load_dataset(&path).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            let bits = |s: &Sample| s.features.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(to_bytes(&back).unwrap(), to_bytes(&d).unwrap());
    }

    #[test]
    fn rle_payloads_decode_to_the_original_masks() {
        let d = small();
        let text = String::from_utf8(to_bytes(&d).unwrap()).unwrap();
        let line: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
        let rles: Vec<RleMask> = line["instances"]
            .as_array()
            .unwrap()
            .iter()
            .map(|i| serde_json::from_value(i["mask"].clone()).unwrap())
            .collect();
        assert_eq!(rles.len(), d.samples[0].instances.len());
        for (rle, inst) in rles.iter().zip(&d.samples[0].instances) {
            assert_eq!(rle_decode(rle).unwrap(), inst.mask);
        }
    }

    #[test]
    fn truncation_is_rejected() {
        let bytes = to_bytes(&small()).unwrap();
        for cut in [0, 1, bytes.len() / 3, bytes.len() / 2, bytes.len() - 2, bytes.len() - 1] {
            assert!(from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        // dropping whole trailing lines
        let text = String::from_utf8(bytes).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let partial = lines[..lines.len() - 1].join("\n") + "\n";
        assert!(from_bytes(partial.as_bytes()).is_err());
    }

    #[test]
    fn corruption_fails_the_checksum() {
        let mut bytes = to_bytes(&small()).unwrap();
        let pos = bytes.iter().position(|&b| b == b'"').unwrap() + 1;
        bytes[pos] = if bytes[pos] == b'x' { b'y' } else { b'x' };
        assert!(matches!(from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn wrong_format_tag_is_rejected() {
        let d = small();
        let mut out = Vec::new();
        serde_json::to_writer(
            &mut out,
            &Record::Manifest {
                format: "other".into(),
                manifest: d.manifest.clone(),
            },
        )
        .unwrap();
        out.push(b'\n');
        let digest = hex(&Sha256::digest(&out));
        serde_json::to_writer(&mut out, &Record::Checksum { samples: 0, sha256: digest }).unwrap();
        out.push(b'\n');
        assert!(matches!(from_bytes(&out), Err(Error::Malformed(_))));
    }
}
