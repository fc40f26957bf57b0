//! Bundle files: a line-delimited JSON manifest (`<stem>.jsonl`, one record
//! per line) plus the scene features in an embedding archive (`<stem>.emb`).

use super::archive::{export_embedding_archive, import_embedding_archive, EmbeddingArchive};
use super::split::{
    BinaryItem, BundleManifest, CaptionRecord, ClsItem, DatasetBundle, McqItem, SplitKind,
};
use super::SceneSpec;
use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum Line {
    Manifest {
        split: SplitKind,
        manifest: BundleManifest,
    },
    Scene {
        scene_id: u64,
        present: Vec<usize>,
    },
    Caption(CaptionRecord),
    Mcq(McqItem),
    Binary(BinaryItem),
    Cls(ClsItem),
}

fn paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("jsonl"), stem.with_extension("emb"))
}

/// Writes `<stem>.jsonl` and `<stem>.emb`; returns both paths.
pub fn write_bundle(bundle: &DatasetBundle, stem: impl AsRef<Path>) -> Result<(PathBuf, PathBuf)> {
    let (jsonl, emb) = paths(stem.as_ref());
    let mut out = std::io::BufWriter::new(std::fs::File::create(&jsonl)?);
    let mut write = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut out, line)?;
        out.write_all(b"\n")?;
        Ok(())
    };
    write(&Line::Manifest {
        split: bundle.split,
        manifest: bundle.manifest.clone(),
    })?;
    for s in &bundle.scenes {
        write(&Line::Scene {
            scene_id: s.scene_id,
            present: s.present.clone(),
        })?;
    }
    for c in &bundle.captions {
        write(&Line::Caption(c.clone()))?;
    }
    for m in &bundle.mcq {
        write(&Line::Mcq(m.clone()))?;
    }
    for b in &bundle.binary {
        write(&Line::Binary(b.clone()))?;
    }
    for c in &bundle.cls {
        write(&Line::Cls(c.clone()))?;
    }
    out.flush()?;

    let mut archive = EmbeddingArchive::new(bundle.manifest.dim, true, bundle.split.as_str());
    for s in &bundle.scenes {
        archive.push(s.scene_id, &s.feature)?;
    }
    export_embedding_archive(&archive, &emb)?;
    Ok((jsonl, emb))
}

/// Reads a bundle written by [`write_bundle`]. `stem` may carry either extension.
pub fn read_bundle(stem: impl AsRef<Path>) -> Result<DatasetBundle> {
    let (jsonl, emb) = paths(stem.as_ref());
    let reader = BufReader::new(std::fs::File::open(&jsonl)?);
    let mut header = None;
    let mut scenes = Vec::new();
    let (mut captions, mut mcq, mut binary, mut cls) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Line>(&line)? {
            Line::Manifest { split, manifest } => header = Some((split, manifest)),
            Line::Scene { scene_id, present } => scenes.push(SceneSpec {
                scene_id,
                present,
                feature: Vec::new(),
            }),
            Line::Caption(c) => captions.push(c),
            Line::Mcq(m) => mcq.push(m),
            Line::Binary(b) => binary.push(b),
            Line::Cls(c) => cls.push(c),
        }
    }
    let (split, manifest) =
        header.ok_or_else(|| NeatError::Corrupted("bundle manifest line missing".into()))?;
    let archive = import_embedding_archive(&emb)?.expect_dim(manifest.dim)?;
    if archive.records.len() != scenes.len() {
        return Err(NeatError::Corrupted(format!(
            "{} scenes but {} feature records",
            scenes.len(),
            archive.records.len()
        )));
    }
    for (scene, (id, v)) in scenes.iter_mut().zip(archive.records) {
        if scene.scene_id != id {
            return Err(NeatError::Corrupted(format!(
                "feature record {id} does not match scene {}",
                scene.scene_id
            )));
        }
        scene.feature = v.into_iter().map(f64::from).collect();
    }
    let bundle = DatasetBundle {
        split,
        manifest,
        scenes,
        captions,
        mcq,
        binary,
        cls,
    };
    bundle.validate()?;
    Ok(bundle)
}
