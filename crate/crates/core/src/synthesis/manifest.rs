//! JSON-lines manifest: a header object followed by one triplet per line.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, TripletSample};
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub seed: u64,
    pub class_counts: BTreeMap<String, usize>,
}

impl DatasetManifest {
    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            version: MANIFEST_VERSION,
            seed: self.seed,
            class_counts: self.class_counts.clone(),
        };
        let mut out = serde_json::to_string(&header)?;
        out.push('\n');
        for s in &self.samples {
            out.push_str(&serde_json::to_string(s)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, origin: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, first) = lines.next().ok_or_else(|| parse_err(1, "missing header".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| parse_err(1, format!("header: {e}")))?;
        if header.version != MANIFEST_VERSION {
            return Err(parse_err(1, format!("unsupported version {}", header.version)));
        }
        let mut samples = Vec::new();
        for (i, line) in lines {
            let s: TripletSample =
                serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
            samples.push(s);
        }
        let manifest = DatasetManifest::new(samples, header.seed);
        if manifest.class_counts != header.class_counts {
            return Err(parse_err(1, "class_counts disagree with the records".into()));
        }
        let mut ids: Vec<&str> = manifest.samples.iter().map(|s| s.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(parse_err(0, format!("duplicate id {}", w[0])));
        }
        Ok(manifest)
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(manifest.to_jsonl()?.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    for line in BufReader::new(f).lines() {
        text.push_str(&line.map_err(|e| Error::io(path, e))?);
        text.push('\n');
    }
    DatasetManifest::from_jsonl(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::super::Split;
    use super::*;
    use crate::types::MaskRLE;

    fn manifest() -> DatasetManifest {
        DatasetManifest::new(
            vec![TripletSample {
                id: "s000000".into(),
                image_uri: "img/a.png".into(),
                mask: MaskRLE { size: [2, 2], counts: vec![1, 2, 1] },
                audio_uri: "aud/a.wav".into(),
                canonical_class: "dog".into(),
                split: Split::Test,
            }],
            5,
        )
    }

    #[test]
    fn record_fields_are_exact() {
        let text = manifest().to_jsonl().unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), r#"{"version":1,"seed":5,"class_counts":{"dog":1}}"#);
        assert_eq!(
            lines.next().unwrap(),
            r#"{"id":"s000000","image_uri":"img/a.png","mask":{"size":[2,2],"counts":[1,2,1]},"audio_uri":"aud/a.wav","class":"dog","split":"test"}"#
        );
    }

    #[test]
    fn round_trip_and_validation() {
        let m = manifest();
        let text = m.to_jsonl().unwrap();
        assert_eq!(DatasetManifest::from_jsonl(&text, "m").unwrap(), m);
        let tampered = text.replace(r#""dog":1"#, r#""dog":2"#);
        assert!(DatasetManifest::from_jsonl(&tampered, "m").is_err());
        let dup = format!("{}{}", text.replace(r#""dog":1"#, r#""dog":2"#), text.lines().nth(1).unwrap());
        assert!(DatasetManifest::from_jsonl(&dup, "m").is_err());
    }
}
