use std::path::{Path, PathBuf};

use crate::config::KvMap;
use crate::error::Result;

/// Write `<stem>.txt` and `<stem>.kv` into `dir`, creating it if needed.
pub fn write_report(dir: &Path, stem: &str, text: &str, kv: &KvMap) -> Result<(PathBuf, PathBuf)> {
    std::fs::create_dir_all(dir)?;
    let txt = dir.join(format!("{stem}.txt"));
    let kvp = dir.join(format!("{stem}.kv"));
    std::fs::write(&txt, text)?;
    std::fs::write(&kvp, kv.render())?;
    Ok((txt, kvp))
}
