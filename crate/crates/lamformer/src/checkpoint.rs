//! Checkpoint container: a text header (embedded network config and a
//! manifest of parameter names and shapes) followed by one LTF1 blob per parameter.

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::Path;

use lamformer_core::network::{Model, NetConfig};

use crate::config::{net_pairs, pairs, set_net};
use crate::error::{Error, Result};
use crate::ltf;

const MAGIC: &str = "LAMCKPT1";
const DATA_MARKER: &[u8] = b"\n[data]\n";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub epoch: usize,
}

fn shape_text(shape: &[usize]) -> String {
    shape
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

pub fn encode(model: &Model, epoch: usize) -> Result<Vec<u8>> {
    let mut head = format!("{MAGIC}\nepoch = {epoch}\n[config]\n");
    for (k, v) in net_pairs(model.config()) {
        let _ = writeln!(head, "{k} = {v}");
    }
    let _ = writeln!(head, "net.seed = {}", model.config().seed);
    head.push_str("[manifest]\n");
    for (name, t) in model.params.iter() {
        let _ = writeln!(head, "{name} {}", shape_text(t.shape()));
    }
    head.push_str("[data]\n");
    let mut out = head.into_bytes();
    for t in model.params.tensors() {
        out.extend(ltf::encode(t)?);
    }
    Ok(out)
}

/// Write through a temporary file and rename, so a crash never leaves a partial checkpoint.
pub fn save(path: &Path, model: &Model, epoch: usize) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode(model, epoch)?).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let split = bytes
        .windows(DATA_MARKER.len())
        .position(|w| w == DATA_MARKER)
        .ok_or_else(|| Error::Corrupt("checkpoint header has no [data] section".into()))?;
    let head = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Corrupt("checkpoint header is not UTF-8".into()))?;
    let mut lines = head.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Corrupt(format!("missing {MAGIC} magic")));
    }
    let rest: Vec<&str> = lines.collect();
    let section = |name: &str| rest.iter().position(|l| *l == name);
    let (Some(cfg_at), Some(man_at)) = (section("[config]"), section("[manifest]")) else {
        return Err(Error::Corrupt(
            "checkpoint header lacks [config] or [manifest]".into(),
        ));
    };

    let mut epoch = None;
    for (k, v) in pairs(&rest[..cfg_at].join("\n"))? {
        if k == "epoch" {
            epoch = Some(
                v.parse()
                    .map_err(|_| Error::Corrupt(format!("bad epoch {v:?}")))?,
            );
        }
    }
    let epoch = epoch.ok_or_else(|| Error::Corrupt("checkpoint has no epoch".into()))?;

    let mut config = NetConfig::default();
    for (k, v) in pairs(&rest[cfg_at + 1..man_at].join("\n"))? {
        if !set_net(&mut config, &k, &v)
            .map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?
        {
            return Err(Error::Corrupt(format!(
                "embedded config has unknown key {k:?}"
            )));
        }
    }
    let mut model =
        Model::build(&config).map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?;

    let manifest = &rest[man_at + 1..];
    if manifest.len() != model.params.len() {
        return Err(Error::Corrupt(format!(
            "manifest lists {} parameters, the embedded config builds {}",
            manifest.len(),
            model.params.len()
        )));
    }
    let mut blobs = Cursor::new(&bytes[split + DATA_MARKER.len()..]);
    for (i, line) in manifest.iter().enumerate() {
        let expected_name = model.params.names()[i].clone();
        let expected_shape = model.params.tensors()[i].shape().to_vec();
        let (name, shape) = line.split_once(' ').unwrap_or((line, ""));
        if name != expected_name || shape != shape_text(&expected_shape) {
            return Err(Error::Corrupt(format!(
                "parameter {name}: manifest entry {line:?} does not match {expected_name} {}",
                shape_text(&expected_shape)
            )));
        }
        let t =
            ltf::read(&mut blobs).map_err(|e| Error::Corrupt(format!("parameter {name}: {e}")))?;
        if t.shape() != expected_shape {
            return Err(Error::Corrupt(format!(
                "parameter {name}: blob shape {:?}, expected {:?}",
                t.shape(),
                expected_shape
            )));
        }
        model.params.tensors_mut()[i] = t;
    }
    if (blobs.position() as usize) != blobs.get_ref().len() {
        return Err(Error::Corrupt(
            "trailing bytes after the last parameter".into(),
        ));
    }
    Ok(Checkpoint { model, epoch })
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Corrupt(m) => Error::Corrupt(format!("{}: {m}", path.display())),
        e => e,
    })
}

/// Load and require the architecture of `expected` (the seed may differ).
pub fn load_compatible(path: &Path, expected: &NetConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    let diffs: Vec<String> = net_pairs(ck.model.config())
        .into_iter()
        .zip(net_pairs(expected))
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, b)| format!("{} is {} in the file but {} was requested", a.0, a.1, b.1))
        .collect();
    if diffs.is_empty() {
        Ok(ck)
    } else {
        Err(Error::Incompatible(format!(
            "{}: {}",
            path.display(),
            diffs.join("; ")
        )))
    }
}
