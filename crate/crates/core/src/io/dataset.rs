//! Phantom datasets on disk: `scan_NNN_image.tns` (f32) and
//! `scan_NNN_label.tns` (u8) for consecutive `NNN` from 000.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::io::tensor_file::{read_tensor, write_tensor};
use crate::phantom::Scan;

pub fn image_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("scan_{i:03}_image.tns"))
}

pub fn label_path(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("scan_{i:03}_label.tns"))
}

pub fn write_dataset(dir: &Path, scans: &[Scan]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, s) in scans.iter().enumerate() {
        write_tensor(&image_path(dir, i), &s.image)?;
        write_tensor(&label_path(dir, i), &s.labels)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<Scan>> {
    let mut scans = Vec::new();
    loop {
        let img = image_path(dir, scans.len());
        if !img.exists() {
            break;
        }
        let image = read_tensor(&img)?;
        let labels = read_tensor(&label_path(dir, scans.len()))?;
        if image.shape() != labels.shape() || image.rank() != 2 {
            return Err(Error::shape("read_dataset", image.shape(), labels.shape()));
        }
        scans.push(Scan { image, labels });
    }
    if scans.is_empty() {
        return Err(Error::io(
            image_path(dir, 0),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no scans in dataset directory"),
        ));
    }
    Ok(scans)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{gen_phantoms, PhantomSpec};

    #[test]
    fn dataset_round_trip_is_byte_stable() {
        let scans = gen_phantoms(&PhantomSpec {
            n_scans: 5,
            ..Default::default()
        })
        .unwrap();
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        write_dataset(a.path(), &scans).unwrap();
        write_dataset(b.path(), &scans).unwrap();
        assert_eq!(read_dataset(a.path()).unwrap(), scans);
        for i in 0..5 {
            assert_eq!(
                std::fs::read(image_path(a.path(), i)).unwrap(),
                std::fs::read(image_path(b.path(), i)).unwrap()
            );
        }
        assert_eq!(std::fs::metadata(image_path(a.path(), 0)).unwrap().len(), 7 + 8 + 64 * 64 * 4);
    }
}
