use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use mimetic::inspect::format_g17;
use mimetic::{Error, Matrix, Result};

/// Output directory plus the list of files written into it, for the manifest.
pub struct OutDir {
    root: PathBuf,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self {
            root: root.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// `rel` under the output directory; absolute paths pass through.
    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: impl AsRef<Path>, contents: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn write_json<T: serde::Serialize>(&mut self, rel: impl AsRef<Path>, value: &T) -> Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        text.push('\n');
        self.write(rel, text)
    }

    /// Records a file written by someone else.
    pub fn record(&mut self, path: PathBuf) {
        self.written.push(path);
    }

    /// Writes `manifest.<command>.txt`. Everything but the `timestamp` line
    /// is a function of the flags, so reruns differ on that line only.
    pub fn write_manifest(&mut self, command: &str, seed: u64, inputs: &[PathBuf]) -> Result<()> {
        let mut text = format!("tool: mimetic {}\n", env!("CARGO_PKG_VERSION"));
        text.push_str(&format!("command: {command}\n"));
        let args: Vec<String> = std::env::args().skip(1).collect();
        text.push_str(&format!("argv: {}\n", args.join(" ")));
        text.push_str(&format!("seed: {seed}\n"));
        for input in inputs {
            text.push_str(&format!("input: {}\n", input.display()));
        }
        for output in &self.written {
            let rel = output.strip_prefix(&self.root).unwrap_or(output);
            text.push_str(&format!("output: {}\n", rel.display()));
        }
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        text.push_str(&format!("timestamp: {secs}\n"));
        fs::write(self.path(format!("manifest.{command}.txt")), text)?;
        Ok(())
    }
}

/// Comma-separated rows at `%.17g` precision.
pub fn matrix_csv(m: &Matrix) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|&v| format_g17(v)).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Applies `f` to every item on up to `threads` workers; results keep
/// the input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = threads.clamp(1, items.len().max(1));
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}
