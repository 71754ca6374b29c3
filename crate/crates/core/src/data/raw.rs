//! Raw volume format: a JSON sidecar next to a little-endian `f32` block.
//!
//! `<stem>.json` holds `{"shape":[S,H,W],"spacing":[z,y,x],"dtype":"f32","labels":null|[names]}`
//! and `<stem>.raw` holds `S·H·W` values in row-major order. `labels` names the
//! integer classes of a mask volume and is `null` for images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawHeader {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
}

/// Path of the value block belonging to a sidecar.
pub fn data_path(sidecar: &Path) -> PathBuf {
    sidecar.with_extension("raw")
}

pub fn write_raw(sidecar: &Path, volume: &Volume<f32>, spacing: [f64; 3], labels: Option<&[&str]>) -> Result<()> {
    let header = RawHeader {
        shape: volume.shape,
        spacing,
        dtype: "f32".into(),
        labels: labels.map(|l| l.iter().map(|s| s.to_string()).collect()),
    };
    let json = serde_json::to_string_pretty(&header)?;
    std::fs::write(sidecar, json).map_err(|e| Error::io(format!("writing {}", sidecar.display()), e))?;
    let bytes: Vec<u8> = volume.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    let raw = data_path(sidecar);
    std::fs::write(&raw, bytes).map_err(|e| Error::io(format!("writing {}", raw.display()), e))
}

pub fn read_raw(sidecar: &Path) -> Result<(Volume<f32>, RawHeader)> {
    let parse = |message: String| Error::Parse { path: sidecar.to_path_buf(), message };
    let text = std::fs::read_to_string(sidecar)
        .map_err(|e| Error::io(format!("reading {}", sidecar.display()), e))?;
    let header: RawHeader = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
    if header.dtype != "f32" {
        return Err(parse(format!("unsupported dtype {:?}", header.dtype)));
    }
    let raw = data_path(sidecar);
    let bytes = std::fs::read(&raw).map_err(|e| Error::io(format!("reading {}", raw.display()), e))?;
    let n: usize = header.shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(parse(format!("expected {} bytes of data, found {}", 4 * n, bytes.len())));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let volume = Volume::new(header.shape, data).map_err(|e| parse(e.to_string()))?;
    Ok((volume, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_exact_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("volume.json");
        let vol = Volume::new([2, 2, 3], vec![0.1, -0.0, f32::MAX, 1e-40, 3.0, 7.5, 8.0, 9.0, 1.0, 2.0, 3.0, 4.0]).unwrap();
        write_raw(&path, &vol, [10.0, 1.5, 1.25], None).unwrap();
        let (back, header) = read_raw(&path).unwrap();
        let bits = |v: &Volume<f32>| v.data.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&vol));
        assert_eq!(header.spacing, [10.0, 1.5, 1.25]);
        assert!(dir.path().join("volume.raw").exists());
    }

    #[test]
    fn rejects_truncated_and_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        write_raw(&path, &Volume::new([1, 1, 2], vec![1.0, 2.0]).unwrap(), [1.0; 3], None).unwrap();
        std::fs::write(dir.path().join("v.raw"), [0u8; 5]).unwrap();
        assert!(matches!(read_raw(&path), Err(Error::Parse { .. })));
        std::fs::write(&path, r#"{"shape":[1,1,1],"spacing":[1,1,1],"dtype":"f32","extra":1}"#).unwrap();
        assert!(matches!(read_raw(&path), Err(Error::Parse { .. })));
    }
}
