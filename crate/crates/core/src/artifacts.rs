//! Output file helpers: collision-free naming and atomic writes.

use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};

/// `dir/{stem}{suffix}.{ext}` where suffix is empty, then `-2`, `-3`, ...
/// for the first name not already taken.
pub fn unique_path(dir: &Path, stem: &str, ext: &str) -> PathBuf {
    (1..)
        .map(|n| {
            let name = if n == 1 {
                format!("{stem}.{ext}")
            } else {
                format!("{stem}-{n}.{ext}")
            };
            dir.join(name)
        })
        .find(|p| !p.exists())
        .expect("unbounded suffix search")
}

/// Create `path` exclusively and write `bytes`; fails if the file exists.
pub fn write_new(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path)?;
    if let Err(e) = f.write_all(bytes).and_then(|_| f.flush()) {
        drop(f);
        let _ = fs::remove_file(path);
        return Err(e);
    }
    Ok(())
}

/// Write through a sibling temp file and rename over `path`.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp"));
    let result = fs::write(&tmp, bytes).and_then(|_| fs::rename(&tmp, path));
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Write to the first free `dir/{stem}[-n].{ext}` and return the path.
pub fn write_unique(dir: &Path, stem: &str, ext: &str, bytes: &[u8]) -> io::Result<PathBuf> {
    fs::create_dir_all(dir)?;
    loop {
        let path = unique_path(dir, stem, ext);
        match write_new(&path, bytes) {
            Ok(()) => return Ok(path),
            // lost a race for the name; pick the next one
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffixes_on_collision() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_unique(dir.path(), "rbt_20251031T000000Z", "json", b"1").unwrap();
        let b = write_unique(dir.path(), "rbt_20251031T000000Z", "json", b"2").unwrap();
        assert!(a.ends_with("rbt_20251031T000000Z.json"));
        assert!(b.ends_with("rbt_20251031T000000Z-2.json"));
        assert_eq!(fs::read(&a).unwrap(), b"1");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("new_prompt.txt");
        atomic_write(&p, b"one").unwrap();
        atomic_write(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(write_new(&p, b"x").is_err());
    }
}
