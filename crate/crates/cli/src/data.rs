//! Sample directories: `frame.evdt`, `events.txt`, `masks.rle`, `scene.toml`.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use evdistill::dump::TensorDump;
use evdistill::events::{normalize_volume, read_events, voxelize, write_events, TimeWindow, DEFAULT_BINS, DEFAULT_WINDOW_US};
use evdistill::metrics::{read_rle, write_rle, MaskSet};
use evdistill::synth::{random_scene, render_sample, SceneSpec};
use evdistill::trainer::TrainSample;

use crate::config::DataConfig;

pub const FRAME_FILE: &str = "frame.evdt";
pub const EVENTS_FILE: &str = "events.txt";
pub const MASKS_FILE: &str = "masks.rle";
pub const SCENE_FILE: &str = "scene.toml";

#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub name: String,
    pub train: TrainSample,
    pub masks: MaskSet,
}

pub fn write_sample(dir: &Path, spec: &SceneSpec) -> Result<()> {
    let s = render_sample(spec)?;
    std::fs::create_dir_all(dir)?;
    let mut dump = TensorDump::new();
    dump.push("frame", &s.image);
    dump.write(dir.join(FRAME_FILE))?;
    write_events(dir.join(EVENTS_FILE), &s.events, Some((spec.height, spec.width)))?;
    write_rle(dir.join(MASKS_FILE), &s.masks)?;
    std::fs::write(dir.join(SCENE_FILE), toml::to_string(spec)?)?;
    Ok(())
}

/// Sorted sample folders under `dir`.
pub fn sample_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).with_context(|| format!("reading data dir {}", dir.display()))? {
        let path = entry?.path();
        if path.join(FRAME_FILE).is_file() {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        bail!("no samples (folders with {FRAME_FILE}) in {}", dir.display());
    }
    Ok(out)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn load_sample(dir: &Path) -> Result<LoadedSample> {
    let ctx = || format!("loading sample {}", dir.display());
    let image = TensorDump::read(dir.join(FRAME_FILE)).with_context(ctx)?.tensor("frame").with_context(ctx)?;
    let [h, w, _] = image.dims() else {
        bail!("{}: frame must be H x W x 3", dir.display());
    };
    let (h, w) = (*h, *w);
    let window = match std::fs::read_to_string(dir.join(SCENE_FILE)) {
        Ok(text) => toml::from_str::<SceneSpec>(&text).with_context(ctx)?.window(),
        Err(_) => TimeWindow::new(0, DEFAULT_WINDOW_US)?,
    };
    let events = read_events(dir.join(EVENTS_FILE)).with_context(ctx)?;
    let volume = normalize_volume(&voxelize(&events.events, window, h, w, DEFAULT_BINS)?).grid;
    let masks = read_rle(dir.join(MASKS_FILE)).with_context(ctx)?;
    Ok(LoadedSample {
        name: dir_name(dir),
        train: TrainSample { image, events: volume },
        masks,
    })
}

pub fn load_dir(dir: &Path) -> Result<Vec<LoadedSample>> {
    sample_dirs(dir)?.iter().map(|d| load_sample(d)).collect()
}

pub fn synth_scene(cfg: &DataConfig, size: usize, i: usize) -> SceneSpec {
    random_scene(size, size, cfg.synth_shapes, cfg.synth_seed.wrapping_add(i as u64))
}

/// Samples from `cfg.dir`, or freshly generated scenes of `size × size`.
pub fn load_data(cfg: &DataConfig, size: usize) -> Result<Vec<LoadedSample>> {
    let samples = match &cfg.dir {
        Some(dir) => load_dir(dir)?,
        None => (0..cfg.synth_samples)
            .map(|i| {
                let s = render_sample(&synth_scene(cfg, size, i))?;
                Ok(LoadedSample {
                    name: format!("synth_{i:03}"),
                    train: TrainSample {
                        image: s.image,
                        events: s.volume,
                    },
                    masks: s.masks,
                })
            })
            .collect::<Result<_>>()?,
    };
    for s in &samples {
        if s.train.image.dims() != [size, size, 3] {
            bail!("sample {} is {:?}, model expects [{size}, {size}, 3]", s.name, s.train.image.dims());
        }
    }
    Ok(samples)
}
