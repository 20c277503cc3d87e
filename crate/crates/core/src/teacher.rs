//! Full-precision block inputs and targets over the calibration set.

use std::path::{Path, PathBuf};

use crate::calibration::CalibrationSet;
use crate::checkpoint::Container;
use crate::error::{Error, Result};
use crate::model::{Model, NoHooks};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
enum Level {
    Memory(Tensor),
    Disk(PathBuf),
}

/// `levels[l]` is the input of block `l`; `levels[l + 1]` is its target.
#[derive(Debug)]
pub struct TeacherCache {
    levels: Vec<Level>,
}

#[derive(Clone, Debug)]
pub struct CacheOptions {
    /// Bytes kept in memory before later levels go to disk.
    pub memory_budget: usize,
    pub spill_dir: Option<PathBuf>,
}

impl Default for CacheOptions {
    fn default() -> Self {
        Self {
            memory_budget: usize::MAX,
            spill_dir: None,
        }
    }
}

impl TeacherCache {
    pub fn build(model: &Model, calib: &CalibrationSet, opts: &CacheOptions) -> Result<Self> {
        let mut cur = calib.tokens()?;
        let mut levels = Vec::with_capacity(model.config.depth + 1);
        let mut used = 0usize;
        for l in 0..=model.config.depth {
            let next = if l < model.config.depth {
                let outs = calib
                    .batches
                    .iter()
                    .scan(0usize, |start, b| {
                        let n = b.shape()[0];
                        let part = cur.narrow(0, *start, n);
                        *start += n;
                        Some(part)
                    })
                    .map(|part| model.forward_blocks(&part?, l..l + 1, &mut NoHooks))
                    .collect::<Result<Vec<_>>>()?;
                Some(Tensor::concat_rows(&outs)?)
            } else {
                None
            };
            let bytes = cur.len() * 4;
            if used.saturating_add(bytes) <= opts.memory_budget {
                used += bytes;
                levels.push(Level::Memory(cur));
            } else {
                let dir = opts.spill_dir.as_deref().ok_or_else(|| {
                    Error::Config("teacher cache exceeds its memory budget and has no spill directory".into())
                })?;
                levels.push(Level::Disk(spill(dir, l, cur)?));
            }
            match next {
                Some(n) => cur = n,
                None => break,
            }
        }
        Ok(Self { levels })
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    fn level(&self, l: usize) -> Result<Tensor> {
        match self.levels.get(l) {
            None => Err(Error::Contract(format!("teacher cache has no level {l}"))),
            Some(Level::Memory(t)) => Ok(t.clone()),
            Some(Level::Disk(path)) => Container::load(path)?.take("x"),
        }
    }

    /// Full-precision input of block `l`.
    pub fn input(&self, l: usize) -> Result<Tensor> {
        self.level(l)
    }

    /// Full-precision output of block `l`.
    pub fn target(&self, l: usize) -> Result<Tensor> {
        self.level(l + 1)
    }

    pub fn spilled_levels(&self) -> usize {
        self.levels.iter().filter(|l| matches!(l, Level::Disk(_))).count()
    }
}

fn spill(dir: &Path, l: usize, t: Tensor) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(format!("teacher.{l}.qfck"));
    let mut c = Container::new();
    c.insert("x", t);
    c.save(&path)?;
    Ok(path)
}
