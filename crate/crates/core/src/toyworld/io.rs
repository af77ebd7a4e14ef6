//! Pack directories: `pack.json` plus one raw little-endian `f32` file per core
//! image (`core_00.f32`, ...), 768 values in HWC order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    CharacterPack, CharacterSpec, CoreImage, Dialogue, KqaItem, McqItem, MmSample, PromptSpec, ToyImage, VqaItem,
};
use crate::{Error, Result};

pub const PACK_FORMAT: &str = "rolekit-pack/1";
pub const PACK_FILE: &str = "pack.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CoreImageEntry {
    file: String,
    prompt: PromptSpec,
    jitter_seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PackFile {
    format: String,
    spec: CharacterSpec,
    profile: String,
    core_images: Vec<CoreImageEntry>,
    dialogues: Vec<Dialogue>,
    mm_samples: Vec<MmSample>,
    kqa: Vec<KqaItem>,
    vqa: Vec<VqaItem>,
    mcq: Vec<McqItem>,
}

pub fn write_raw_f32(image: &ToyImage, path: &Path) -> Result<()> {
    fs::write(path, image.to_le_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: &Path) -> Result<ToyImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    ToyImage::from_le_bytes(&bytes)
}

/// Writes `pack` into directory `dir`, creating it if needed.
pub fn write_pack(pack: &CharacterPack, dir: &Path) -> Result<()> {
    pack.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut core_images = Vec::with_capacity(pack.core_images.len());
    for (i, core) in pack.core_images.iter().enumerate() {
        let file = format!("core_{i:02}.f32");
        write_raw_f32(&core.image, &dir.join(&file))?;
        core_images.push(CoreImageEntry { file, prompt: core.prompt.clone(), jitter_seed: core.jitter_seed });
    }
    let doc = PackFile {
        format: PACK_FORMAT.to_string(),
        spec: pack.spec.clone(),
        profile: pack.profile.clone(),
        core_images,
        dialogues: pack.dialogues.clone(),
        mm_samples: pack.mm_samples.clone(),
        kqa: pack.kqa.clone(),
        vqa: pack.vqa.clone(),
        mcq: pack.mcq.clone(),
    };
    let path = dir.join(PACK_FILE);
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Loads a pack directory written by [`write_pack`].
pub fn load_pack(dir: &Path) -> Result<CharacterPack> {
    let path = dir.join(PACK_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let doc: PackFile = serde_json::from_str(&text).map_err(|source| Error::Parse { path: path.clone(), source })?;
    if doc.format != PACK_FORMAT {
        return Err(Error::schema("format", format!("expected {PACK_FORMAT}, found {}", doc.format)));
    }
    let n = doc.core_images.len();
    if !(super::pack::MIN_CORE_IMAGES..=super::pack::MAX_CORE_IMAGES).contains(&n) {
        return Err(Error::schema("core_images length", format!("{n} images")));
    }
    let mut core_images = Vec::with_capacity(n);
    for (i, entry) in doc.core_images.into_iter().enumerate() {
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
            return Err(Error::schema(format!("core_images[{i}].file"), "must be a plain file name"));
        }
        let image = read_raw_f32(&dir.join(&entry.file)).map_err(|e| match e {
            Error::InvalidImage(reason) => Error::schema(format!("core_images[{i}].file"), reason),
            other => other,
        })?;
        core_images.push(CoreImage { image, prompt: entry.prompt, jitter_seed: entry.jitter_seed });
    }
    let pack = CharacterPack {
        spec: doc.spec,
        profile: doc.profile,
        core_images,
        dialogues: doc.dialogues,
        mm_samples: doc.mm_samples,
        kqa: doc.kqa,
        vqa: doc.vqa,
        mcq: doc.mcq,
    };
    pack.validate()?;
    Ok(pack)
}
