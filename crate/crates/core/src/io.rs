use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::error::{GebcError, Result};

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| GebcError::io(dir, e))?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| GebcError::invalid(format!("{} has no file name", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| GebcError::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| GebcError::io(&tmp, e))?;
        f.sync_all().map_err(|e| GebcError::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| GebcError::io(path, e))
}

/// Serializes a safetensors container with its JSON header keys sorted, so
/// equal contents always give equal bytes.
pub fn serialize_safetensors(
    views: Vec<(String, safetensors::tensor::TensorView<'_>)>,
    metadata: HashMap<String, String>,
) -> Result<Vec<u8>> {
    let raw = safetensors::serialize(views, &Some(metadata))
        .map_err(|e| GebcError::invalid(format!("serialize tensors: {e}")))?;
    let header_len = u64::from_le_bytes(raw[..8].try_into().expect("8 bytes")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&raw[8..8 + header_len])
        .map_err(|e| GebcError::invalid(format!("re-read tensor header: {e}")))?;
    // serde_json maps are key-sorted
    let mut text = serde_json::to_string(&header).expect("json value serializes").into_bytes();
    while text.len() % 8 != 0 {
        text.push(b' ');
    }
    let mut out = Vec::with_capacity(8 + text.len() + raw.len() - 8 - header_len);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(&text);
    out.extend_from_slice(&raw[8 + header_len..]);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use safetensors::{tensor::TensorView, Dtype, SafeTensors};

    #[test]
    fn canonical_bytes_and_readable() {
        let data = [1u8, 0, 0, 0, 2, 0, 0, 0];
        let make = || {
            let mut meta = HashMap::new();
            for k in ["a", "b", "c", "d", "e", "f", "g"] {
                meta.insert(k.to_string(), k.repeat(3));
            }
            let views = vec![
                ("y".to_string(), TensorView::new(Dtype::I32, vec![1], &data[..4]).unwrap()),
                ("x".to_string(), TensorView::new(Dtype::I32, vec![1], &data[4..]).unwrap()),
            ];
            serialize_safetensors(views, meta).unwrap()
        };
        let first = make();
        for _ in 0..5 {
            assert_eq!(make(), first);
        }
        let st = SafeTensors::deserialize(&first).unwrap();
        assert_eq!(st.tensor("y").unwrap().data(), &data[..4]);
        assert_eq!(st.tensor("x").unwrap().data(), &data[4..]);
        let (_, meta) = SafeTensors::read_metadata(&first).unwrap();
        assert_eq!(meta.metadata().as_ref().unwrap()["g"], "ggg");
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/out.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
