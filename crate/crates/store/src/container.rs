//! Containers: append-only files of concatenated trimmed packages, capped
//! at a fixed size. Only the newest container is open for appends.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use reed_core::{Error, Result};

use crate::index::Location;

fn container_path(dir: &Path, id: u32) -> PathBuf {
    dir.join(format!("{id:08}.ctr"))
}

fn list_ids(dir: &Path) -> Result<Vec<u32>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name();
        let name = name.to_string_lossy();
        if let Some(id) = name.strip_suffix(".ctr").and_then(|s| s.parse().ok()) {
            ids.push(id);
        }
    }
    ids.sort_unstable();
    Ok(ids)
}

#[derive(Debug)]
pub struct ContainerStore {
    dir: PathBuf,
    capacity: u64,
    open_id: u32,
    open_len: u64,
    open_file: File,
    /// Containers sealed during the current batch, awaiting fsync.
    pending_sync: Vec<File>,
}

impl ContainerStore {
    /// Opens the store, cutting every container back to what the index
    /// references; bytes past that belong to a batch that never committed.
    pub fn open(dir: &Path, capacity: u64, extents: &HashMap<u32, u64>) -> Result<Self> {
        if capacity == 0 || capacity > u32::MAX as u64 {
            return Err(Error::InvalidConfig(format!("container size {capacity} out of range")));
        }
        fs::create_dir_all(dir)?;
        let ids = list_ids(dir)?;
        for &id in &ids {
            let want = extents.get(&id).copied().unwrap_or(0);
            let path = container_path(dir, id);
            let have = fs::metadata(&path)?.len();
            if have < want {
                return Err(Error::StorageUnavailable(format!(
                    "container {id} is {have} bytes but the index references {want}"
                )));
            }
            if have > want {
                log::warn!("container {id}: dropping {} uncommitted bytes", have - want);
                let f = OpenOptions::new().write(true).open(&path)?;
                f.set_len(want)?;
                f.sync_all()?;
            }
        }
        let open_id = ids.last().copied().unwrap_or(0);
        let open_file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(container_path(dir, open_id))?;
        let open_len = open_file.metadata()?.len();
        Ok(ContainerStore {
            dir: dir.to_path_buf(),
            capacity,
            open_id,
            open_len,
            open_file,
            pending_sync: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    /// Containers holding at least one byte.
    pub fn count(&self) -> u64 {
        self.open_id as u64 + u64::from(self.open_len > 0)
    }

    fn rotate(&mut self) -> Result<()> {
        let next = self.open_id + 1;
        let file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(container_path(&self.dir, next))?;
        let sealed = std::mem::replace(&mut self.open_file, file);
        self.pending_sync.push(sealed);
        self.open_id = next;
        self.open_len = 0;
        Ok(())
    }

    /// Appends one package, sealing the open container first if it would
    /// overflow. A package larger than the cap gets a container to itself.
    pub fn append(&mut self, data: &[u8]) -> Result<Location> {
        if self.open_len > 0 && self.open_len + data.len() as u64 > self.capacity {
            self.rotate()?;
        }
        let offset = self.open_len;
        self.open_file.write_all(data)?;
        self.open_len += data.len() as u64;
        Ok(Location {
            container: self.open_id,
            offset: u32::try_from(offset).map_err(|_| Error::StorageUnavailable("container offset overflow".into()))?,
            len: u32::try_from(data.len()).map_err(|_| Error::StorageUnavailable("package too large".into()))?,
        })
    }

    /// Makes every append since the last sync durable.
    pub fn sync(&mut self) -> Result<()> {
        for f in self.pending_sync.drain(..) {
            f.sync_data()?;
        }
        self.open_file.sync_data()?;
        Ok(())
    }

    /// Drops appends made since the last sync, e.g. after a failed batch.
    pub fn rollback(&mut self, to: (u32, u64)) -> Result<()> {
        let (id, len) = to;
        self.pending_sync.clear();
        while self.open_id > id {
            fs::remove_file(container_path(&self.dir, self.open_id))?;
            self.open_id -= 1;
        }
        self.open_file = OpenOptions::new()
            .read(true)
            .append(true)
            .open(container_path(&self.dir, id))?;
        self.open_file.set_len(len)?;
        self.open_len = len;
        Ok(())
    }

    pub fn position(&self) -> (u32, u64) {
        (self.open_id, self.open_len)
    }
}

/// Reads packages, opening each container once; results follow `locs`.
pub fn read_locations(dir: &Path, locs: &[Location]) -> Result<Vec<Vec<u8>>> {
    let mut order: Vec<usize> = (0..locs.len()).collect();
    order.sort_by_key(|&i| (locs[i].container, locs[i].offset));
    let mut out = vec![Vec::new(); locs.len()];
    let mut current: Option<(u32, File)> = None;
    for i in order {
        let loc = locs[i];
        if current.as_ref().map(|(id, _)| *id) != Some(loc.container) {
            current = Some((loc.container, File::open(container_path(dir, loc.container))?));
        }
        let (_, file) = current.as_ref().expect("opened above");
        let mut buf = vec![0u8; loc.len as usize];
        file.read_exact_at(&mut buf, loc.offset as u64)?;
        out[i] = buf;
    }
    Ok(out)
}
