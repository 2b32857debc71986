//! Checkpoints: a tensor table plus a JSON manifest, side by side.
//!
//! Table entries are `param/<var>` (working variables in their compute
//! dtype), `master/<var>` (FP32 masters) and `opt/<slot>` (optimizer state).

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::distrib::Replica;
use crate::error::{Error, Result};
use crate::mixed_precision::Precision;
use crate::params::ParamStore;
use crate::tensor::{read_table, write_table, Tensor};

pub const TABLE_FILE: &str = "checkpoint.tensors";
pub const MANIFEST_FILE: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    /// Completed training steps.
    pub step: u64,
    pub config_hash: String,
    pub dtype: Precision,
    pub loss_scale_kind: String,
    pub loss_scale_state: Value,
    pub optimizer: String,
    pub optimizer_steps: u64,
}

/// Everything needed to resume one replica.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
    pub master: ParamStore,
    pub slots: BTreeMap<String, Tensor>,
}

pub fn exists(dir: &Path) -> bool {
    dir.join(MANIFEST_FILE).is_file() && dir.join(TABLE_FILE).is_file()
}

fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes `replica`'s state after `step` completed steps.
pub fn save(dir: &Path, step: u64, config_hash: &str, replica: &Replica) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut entries: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in replica.vars().iter() {
        entries.push((format!("param/{name}"), t));
    }
    for (name, t) in replica.mp().master().iter() {
        entries.push((format!("master/{name}"), t));
    }
    let slots = replica.optimizer().slots();
    for (name, t) in &slots {
        entries.push((format!("opt/{name}"), t));
    }
    write_atomic(&dir.join(TABLE_FILE), |w| {
        write_table(w, entries.iter().map(|(n, t)| (n.as_str(), *t)))
    })?;
    let policy = replica.mp().policy();
    let manifest = Manifest {
        step,
        config_hash: config_hash.to_string(),
        dtype: replica.precision(),
        loss_scale_kind: policy.kind().to_string(),
        loss_scale_state: policy.state(),
        optimizer: replica.optimizer().kind().to_string(),
        optimizer_steps: replica.optimizer().steps(),
    };
    // The manifest goes last: its presence marks a complete checkpoint.
    write_atomic(&dir.join(MANIFEST_FILE), |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest)?;
        writeln!(w)?;
        Ok(())
    })?;
    Ok(dir.to_path_buf())
}

/// The raw named tensors of a checkpoint.
pub fn load_tensors(dir: &Path) -> Result<Vec<(String, Tensor)>> {
    let path = dir.join(TABLE_FILE);
    let f = File::open(&path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    read_table(&mut BufReader::new(f))
}

pub fn load(dir: &Path) -> Result<Checkpoint> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Checkpoint(format!("no checkpoint at {}: {e}", dir.display())))?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut ck = Checkpoint {
        manifest,
        params: ParamStore::new(),
        master: ParamStore::new(),
        slots: BTreeMap::new(),
    };
    for (name, t) in load_tensors(dir)? {
        if let Some(n) = name.strip_prefix("param/") {
            ck.params.insert(n, t, true)?;
        } else if let Some(n) = name.strip_prefix("master/") {
            ck.master.insert(n, t, true)?;
        } else if let Some(n) = name.strip_prefix("opt/") {
            ck.slots.insert(n.to_string(), t);
        } else {
            return Err(Error::Checkpoint(format!(
                "unexpected table entry '{name}'"
            )));
        }
    }
    Ok(ck)
}

/// Overwrites `replica`'s variables, masters, optimizer and loss-scale
/// state with the checkpoint's.
pub fn restore(ck: &Checkpoint, replica: &mut Replica) -> Result<()> {
    if ck.manifest.dtype != replica.precision() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {:?} state, run is {:?}",
            ck.manifest.dtype,
            replica.precision()
        )));
    }
    if ck.manifest.optimizer != replica.optimizer().kind() {
        return Err(Error::Checkpoint(format!(
            "checkpoint optimizer is {}, run uses {}",
            ck.manifest.optimizer,
            replica.optimizer().kind()
        )));
    }
    if ck.manifest.loss_scale_kind != replica.mp().policy().kind() {
        return Err(Error::Checkpoint(format!(
            "checkpoint loss scaling is {}, run uses {}",
            ck.manifest.loss_scale_kind,
            replica.mp().policy().kind()
        )));
    }
    let (vars, mp, opt) = replica.state_mut();
    let names: Vec<String> = vars.names().map(str::to_string).collect();
    if names.len() != ck.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} variables, model has {}",
            ck.params.len(),
            names.len()
        )));
    }
    for name in &names {
        let t = ck
            .params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks variable '{name}'")))?;
        if t.dtype() != vars.get(name).expect("listed above").dtype() {
            return Err(Error::Checkpoint(format!(
                "variable '{name}' has the wrong dtype"
            )));
        }
        vars.set(name, t.clone())?;
    }
    if ck.master.len() != mp.master().len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} master values, model has {}",
            ck.master.len(),
            mp.master().len()
        )));
    }
    mp.set_master(ck.master.clone())?;
    mp.policy_mut().restore(&ck.manifest.loss_scale_state)?;
    opt.restore(ck.manifest.optimizer_steps, ck.slots.clone())?;
    Ok(())
}
