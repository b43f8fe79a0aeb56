//! Dataset download with MD5 verification.

use std::path::Path;

use capsad_core::capsnet::write_atomic;
use capsad_core::data::{Dataset, FILE_STEMS};
use capsad_core::{Error, Result};
use md5::{Digest, Md5};

const MAX_FILE_BYTES: u64 = 64 << 20;

/// Mirror base URL and the published digests of the gzipped files, in
/// `FILE_STEMS` order.
pub fn source(dataset: Dataset) -> (&'static str, [&'static str; 4]) {
    match dataset {
        Dataset::Mnist => (
            "https://ossci-datasets.s3.amazonaws.com/mnist/",
            [
                "f68b3c2dcbeaaa9fbdd348bbdeb94873",
                "d53e105ee54ea40749a09fcbcd1e9432",
                "9fb629c4189551a2d022fa330f9573f3",
                "ec29112dd5afa0611ce80d1b7f02629c",
            ],
        ),
        Dataset::Fashion => (
            "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/",
            [
                "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
                "25c81989df183df01b3e8a0aad5dffbe",
                "bef4ecab320f06d8554ea6380940ec79",
                "bb300cfdad3c16e7a12a480ee83cd310",
            ],
        ),
        Dataset::Kmnist => (
            "http://codh.rois.ac.jp/kmnist/dataset/kmnist/",
            [
                "bdb82020997e1d708af4cf47b453dcf7",
                "e144d726b3acfaa3e44228e80efcd344",
                "5c965bf0a639b31b8f53240b1b52f4d7",
                "7320c461ea6c1c855c0b718fb2a4b134",
            ],
        ),
    }
}

pub fn md5_hex(bytes: &[u8]) -> String {
    Md5::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn download(url: &str) -> Result<Vec<u8>> {
    let mut resp = ureq::get(url).call().map_err(|e| Error::Data(format!("download of {url} failed: {e}")))?;
    resp.body_mut()
        .with_config()
        .limit(MAX_FILE_BYTES)
        .read_to_vec()
        .map_err(|e| Error::Data(format!("reading {url} failed: {e}")))
}

/// Downloads the four files of `dataset` into `<root>/<dataset>/`, skipping
/// files already present with the right digest.
pub fn fetch(root: &Path, dataset: Dataset) -> Result<()> {
    let dir = root.join(dataset.as_str());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (base, digests) = source(dataset);
    for (stem, want) in FILE_STEMS.iter().zip(digests) {
        let name = format!("{stem}.gz");
        let path = dir.join(&name);
        if let Ok(existing) = std::fs::read(&path) {
            if md5_hex(&existing) == want {
                println!("{}: present, checksum ok", path.display());
                continue;
            }
        }
        let bytes = download(&format!("{base}{name}"))?;
        let got = md5_hex(&bytes);
        if got != want {
            return Err(Error::Data(format!("{name}: MD5 {got} does not match published {want}")));
        }
        write_atomic(&path, &bytes)?;
        println!("{}: downloaded, checksum ok", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn md5_of_known_strings() {
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
        assert_eq!(md5_hex(b"abc"), "900150983cd24fb0d6963f7d28e17f72");
    }

}
