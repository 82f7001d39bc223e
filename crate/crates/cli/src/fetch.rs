use std::fs;
use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context};
use flate2::read::GzDecoder;
use log::info;
use md5::{Digest, Md5};

use attnwise::data::{Dataset, Split};

const FASHION_MNIST_BASE: &str = "http://fashion-mnist.s3-website.eu-central-1.amazonaws.com";
const FASHION_MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "8d4fb7e6c68d591d4c3dfef9ec88bf0d"),
    ("train-labels-idx1-ubyte", "25c81989df183df01b3e8a0aad5dffbe"),
    ("t10k-images-idx3-ubyte", "bef4ecab320f06d8554ea6380940ec79"),
    ("t10k-labels-idx1-ubyte", "bb300cfdad3c16e7a12a480ee83cd310"),
];
const CIFAR10_URL: &str = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz";
const CIFAR10_MD5: &str = "c32a1d4ab5d03f1284b67883e8d87530";

fn download(url: &str, md5: &str) -> anyhow::Result<Vec<u8>> {
    info!("downloading {url}");
    let response = ureq::get(url).call().with_context(|| format!("GET {url}"))?;
    let mut bytes = Vec::new();
    response
        .into_reader()
        .read_to_end(&mut bytes)
        .with_context(|| format!("reading {url}"))?;
    let digest: String = Md5::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect();
    if digest != md5 {
        bail!("checksum mismatch for {url}: expected {md5}, got {digest}");
    }
    Ok(bytes)
}

/// Downloads the official archives, verifies their MD5 sums and unpacks them
/// into the layout `Dataset::load` expects. Files already present are kept.
pub fn fetch(dataset: Dataset, root: &Path) -> anyhow::Result<()> {
    let present = [Split::Train, Split::Test]
        .iter()
        .all(|s| dataset.files(root, *s).iter().all(|f| f.is_file()));
    if present {
        info!("{} already present", dataset.name());
        return Ok(());
    }
    match dataset {
        Dataset::FashionMnist => {
            let dir = root.join("fashion-mnist");
            fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            for (name, md5) in FASHION_MNIST_FILES {
                let gz = download(&format!("{FASHION_MNIST_BASE}/{name}.gz"), md5)?;
                let mut raw = Vec::new();
                GzDecoder::new(gz.as_slice())
                    .read_to_end(&mut raw)
                    .with_context(|| format!("inflating {name}"))?;
                fs::write(dir.join(name), raw).with_context(|| format!("writing {name}"))?;
            }
        }
        Dataset::Cifar10 => {
            fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
            let gz = download(CIFAR10_URL, CIFAR10_MD5)?;
            tar::Archive::new(GzDecoder::new(gz.as_slice()))
                .unpack(root)
                .with_context(|| format!("unpacking into {}", root.display()))?;
        }
    }
    Ok(())
}
