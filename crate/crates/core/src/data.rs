//! MNIST ingestion and the one-digit-per-client label partition.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";
pub const DEFAULT_MIRROR: &str = "https://ossci-datasets.s3.amazonaws.com/mnist";

/// SHA-256 of the four decompressed IDX files, `<hex>  <filename>` per line.
pub const MNIST_MANIFEST: &str = include_str!("../data/mnist.sha256");

#[derive(Clone, Debug)]
pub struct Dataset {
    /// N×784, pixels in [0, 1]
    pub images: Matrix,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn new(images: Matrix, labels: Vec<u8>) -> Result<Self> {
        if images.rows() != labels.len() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if images.as_slice().iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Contract("pixel outside [0, 1]".into()));
        }
        Ok(Dataset { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the listed rows into a new batch.
    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<u8>) {
        let cols = self.images.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.images.row(i));
            labels.push(self.labels[i]);
        }
        (
            Matrix::from_vec(indices.len(), cols, data).expect("row lengths are consistent"),
            labels,
        )
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.gather(&idx);
        Dataset { images, labels }
    }

    pub fn label_histogram(&self) -> [usize; 10] {
        let mut h = [0usize; 10];
        for &l in &self.labels {
            h[l as usize % 10] += 1;
        }
        h
    }
}

fn read_u32(bytes: &[u8], offset: usize, what: &str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Parse {
            offset,
            expected: format!("4-byte big-endian {what}"),
        })
}

/// Parses an IDX3 image file into an N×(rows·cols) matrix scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<Matrix> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != IMAGE_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            expected: format!("image magic {IMAGE_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "image count")? as usize;
    let rows = read_u32(bytes, 8, "row count")? as usize;
    let cols = read_u32(bytes, 12, "column count")? as usize;
    let pixels = rows * cols;
    let need = 16 + count * pixels;
    if bytes.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            expected: format!("{need} bytes for {count} images of {rows}x{cols}"),
        });
    }
    let data = bytes[16..need].iter().map(|&b| b as f64 / 255.0).collect();
    Matrix::from_vec(count, pixels, data)
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = read_u32(bytes, 0, "magic")?;
    if magic != LABEL_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            expected: format!("label magic {LABEL_MAGIC:#010x}, found {magic:#010x}"),
        });
    }
    let count = read_u32(bytes, 4, "label count")? as usize;
    let need = 8 + count;
    if bytes.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            expected: format!("{need} bytes for {count} labels"),
        });
    }
    let labels = bytes[8..need].to_vec();
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(Error::Parse {
            offset: 8 + pos,
            expected: format!("label in 0..=9, found {}", labels[pos]),
        });
    }
    Ok(labels)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images = parse_idx_images(&read_file(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_file(labels_path.as_ref())?)?;
    if images.rows() != labels.len() {
        return Err(Error::Parse {
            offset: 4,
            expected: format!(
                "label count {} to match image count {}",
                labels.len(),
                images.rows()
            ),
        });
    }
    Dataset::new(images, labels)
}

/// Train and test splits from a directory holding the four canonical files.
pub fn load_mnist(dir: impl AsRef<Path>) -> Result<(Dataset, Dataset)> {
    let dir = dir.as_ref();
    let train = load_idx(dir.join(TRAIN_IMAGES), dir.join(TRAIN_LABELS))?;
    let test = load_idx(dir.join(TEST_IMAGES), dir.join(TEST_LABELS))?;
    Ok((train, test))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Parses `<hex>  <filename>` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        match (parts.next(), parts.next(), parts.next()) {
            (Some(hash), Some(name), None) if hash.len() == 64 && hash.bytes().all(|b| b.is_ascii_hexdigit()) => {
                out.push((hash.to_ascii_lowercase(), name.trim_start_matches('*').to_string()));
            }
            _ => {
                return Err(Error::Parse {
                    offset: n,
                    expected: "manifest line `<sha256-hex>  <filename>`".into(),
                })
            }
        }
    }
    Ok(out)
}

/// Source of remote bytes, so the download logic can be exercised offline.
pub trait Fetcher {
    fn get(&self, url: &str) -> Result<Vec<u8>>;
}

pub struct HttpFetcher;

impl Fetcher for HttpFetcher {
    fn get(&self, url: &str) -> Result<Vec<u8>> {
        let network = |reason: String| Error::Network {
            url: url.to_string(),
            reason,
        };
        let mut response = ureq::get(url).call().map_err(|e| network(e.to_string()))?;
        response
            .body_mut()
            .with_config()
            .limit(64 * 1024 * 1024)
            .read_to_vec()
            .map_err(|e| network(e.to_string()))
    }
}

fn gunzip(bytes: &[u8], name: &str) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    GzDecoder::new(bytes).read_to_end(&mut out).map_err(|e| Error::Parse {
        offset: 0,
        expected: format!("gzip stream for {name}: {e}"),
    })?;
    Ok(out)
}

fn file_matches(path: &Path, expected: &str) -> bool {
    fs::read(path).map(|b| sha256_hex(&b) == expected).unwrap_or(false)
}

/// Ensures every manifest entry exists under `dest_dir` with the pinned hash,
/// downloading `<url_base>/<name>.gz` where needed. A bad file is fetched
/// again once before an integrity error is raised.
pub fn fetch_with(fetcher: &dyn Fetcher, url_base: &str, dest_dir: &Path, manifest: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dest_dir).map_err(|e| Error::io(dest_dir, e))?;
    let mut paths = Vec::new();
    for (hash, name) in parse_manifest(manifest)? {
        let path = dest_dir.join(&name);
        if !file_matches(&path, &hash) {
            let url = format!("{}/{}.gz", url_base.trim_end_matches('/'), name);
            let mut actual = String::new();
            for attempt in 0..2 {
                log::info!("fetching {url} (attempt {})", attempt + 1);
                let raw = gunzip(&fetcher.get(&url)?, &name)?;
                actual = sha256_hex(&raw);
                if actual == hash {
                    fs::write(&path, &raw).map_err(|e| Error::io(&path, e))?;
                    break;
                }
                log::warn!("checksum mismatch for {name}");
            }
            if actual != hash {
                return Err(Error::Integrity {
                    file: name,
                    expected: hash,
                    actual,
                });
            }
        }
        paths.push(path);
    }
    Ok(paths)
}

pub fn fetch_mnist(url_base: &str, dest_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    fetch_with(&HttpFetcher, url_base, dest_dir.as_ref(), MNIST_MANIFEST)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shard {
    pub client_id: usize,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Keeps at most `cap` indices, taken in dataset order.
    pub fn truncated(&self, cap: usize) -> Shard {
        Shard {
            client_id: self.client_id,
            indices: self.indices.iter().copied().take(cap).collect(),
        }
    }
}

/// One shard per digit: client `i` receives exactly the samples labelled `i`.
pub fn partition_by_label(ds: &Dataset, clients: usize) -> Result<Vec<Shard>> {
    if clients != 10 {
        return Err(Error::Unsupported(format!(
            "label-skew partition needs exactly 10 clients (one per digit), got {clients}"
        )));
    }
    let mut shards: Vec<Shard> = (0..clients)
        .map(|client_id| Shard {
            client_id,
            indices: Vec::new(),
        })
        .collect();
    for (i, &label) in ds.labels.iter().enumerate() {
        shards[label as usize].indices.push(i);
    }
    for s in shards.iter().filter(|s| s.is_empty()) {
        log::warn!("client {} received an empty shard", s.client_id);
    }
    Ok(shards)
}

/// Index batches for one epoch: a fresh uniform shuffle of the shard, cut into
/// `batch_size` chunks with the short tail kept.
pub fn epoch_batches(shard: &Shard, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    if shard.is_empty() {
        return Err(Error::Contract(format!("client {} has an empty shard", shard.client_id)));
    }
    let mut order = shard.indices.clone();
    order.shuffle(rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Iterator over the materialised mini-batches of one epoch.
pub struct Batches<'a> {
    ds: &'a Dataset,
    chunks: std::vec::IntoIter<Vec<usize>>,
}

impl Iterator for Batches<'_> {
    type Item = (Matrix, Vec<u8>);

    fn next(&mut self) -> Option<Self::Item> {
        self.chunks.next().map(|idx| self.ds.gather(&idx))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        self.chunks.size_hint()
    }
}

pub fn batches<'a>(shard: &Shard, ds: &'a Dataset, batch_size: usize, rng: &mut ChaCha8Rng) -> Result<Batches<'a>> {
    Ok(Batches {
        ds,
        chunks: epoch_batches(shard, batch_size, rng)?.into_iter(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::cell::RefCell;
    use std::collections::HashMap;
    use std::io::Write;

    pub(crate) fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        v.extend_from_slice(&count.to_be_bytes());
        v.extend_from_slice(&rows.to_be_bytes());
        v.extend_from_slice(&cols.to_be_bytes());
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn toy(labels: &[u8]) -> Dataset {
        Dataset::new(Matrix::zeros(labels.len(), 4), labels.to_vec()).unwrap()
    }

    #[test]
    fn two_image_fixture_round_trips() {
        let pixels = [0u8, 51, 102, 153, 204, 255, 0, 255];
        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, idx_images(2, 2, 2, &pixels)).unwrap();
        fs::write(&lp, idx_labels(&[7, 3])).unwrap();
        let ds = load_idx(&ip, &lp).unwrap();
        assert_eq!(ds.images.shape(), (2, 4));
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images.row(0), &[0.0, 0.2, 0.4, 0.6]);
        assert_eq!(ds.images.row(1), &[0.8, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn parse_errors_name_offsets() {
        let mut bad = idx_images(1, 2, 2, &[0; 4]);
        bad[3] = 0x01;
        match parse_idx_images(&bad).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 0),
            e => panic!("{e:?}"),
        }
        let truncated = idx_images(2, 2, 2, &[0; 5]);
        match parse_idx_images(&truncated).unwrap_err() {
            Error::Parse { offset, .. } => assert_eq!(offset, 21),
            e => panic!("{e:?}"),
        }
        assert!(parse_idx_labels(&idx_labels(&[1, 12])).is_err());
        assert!(parse_idx_labels(&[0, 0]).is_err());

        let dir = tempfile::tempdir().unwrap();
        let ip = dir.path().join("img");
        let lp = dir.path().join("lbl");
        fs::write(&ip, idx_images(2, 1, 1, &[0, 255])).unwrap();
        fs::write(&lp, idx_labels(&[1])).unwrap();
        assert!(matches!(load_idx(&ip, &lp), Err(Error::Parse { .. })));
    }

    #[test]
    fn partition_toy_dataset() {
        let shards = partition_by_label(&toy(&[0, 1, 0, 2]), 10).unwrap();
        assert_eq!(shards.len(), 10);
        assert_eq!(shards[0].indices, vec![0, 2]);
        assert_eq!(shards[1].indices, vec![1]);
        assert_eq!(shards[2].indices, vec![3]);
        assert!(shards[3..].iter().all(Shard::is_empty));
        assert!(matches!(partition_by_label(&toy(&[0]), 5), Err(Error::Unsupported(_))));
    }

    #[test]
    fn batches_cover_the_shard() {
        let ds = toy(&[4, 4, 4, 4, 4]);
        let shard = Shard {
            client_id: 4,
            indices: (0..5).collect(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sizes: Vec<usize> = batches(&shard, &ds, 2, &mut rng).unwrap().map(|(x, _)| x.rows()).collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let mut seen: Vec<usize> = epoch_batches(&shard, 2, &mut rng).unwrap().concat();
        seen.sort();
        assert_eq!(seen, vec![0, 1, 2, 3, 4]);

        let a = epoch_batches(&shard, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = epoch_batches(&shard, 2, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert!(epoch_batches(&shard, 0, &mut rng).is_err());
        let empty = Shard {
            client_id: 0,
            indices: vec![],
        };
        assert!(epoch_batches(&empty, 2, &mut rng).is_err());
    }

    #[test]
    fn bundled_manifest_parses() {
        let entries = parse_manifest(MNIST_MANIFEST).unwrap();
        let names: Vec<&str> = entries.iter().map(|(_, n)| n.as_str()).collect();
        assert_eq!(names, vec![TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS]);
        assert!(parse_manifest("xyz  file").is_err());
    }

    struct FakeFetcher {
        served: RefCell<Vec<String>>,
        payloads: RefCell<HashMap<String, Vec<Vec<u8>>>>,
    }

    impl FakeFetcher {
        fn new() -> Self {
            FakeFetcher {
                served: RefCell::new(Vec::new()),
                payloads: RefCell::new(HashMap::new()),
            }
        }

        fn queue(&self, url: &str, raw: &[u8]) {
            let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::fast());
            enc.write_all(raw).unwrap();
            self.payloads
                .borrow_mut()
                .entry(url.to_string())
                .or_default()
                .push(enc.finish().unwrap());
        }
    }

    impl Fetcher for FakeFetcher {
        fn get(&self, url: &str) -> Result<Vec<u8>> {
            self.served.borrow_mut().push(url.to_string());
            let mut p = self.payloads.borrow_mut();
            match p.get_mut(url) {
                Some(q) if !q.is_empty() => Ok(q.remove(0)),
                _ => Err(Error::Network {
                    url: url.into(),
                    reason: "unreachable".into(),
                }),
            }
        }
    }

    #[test]
    fn fetch_is_idempotent_and_repairs() {
        let dir = tempfile::tempdir().unwrap();
        let good = b"canonical bytes".to_vec();
        let manifest = format!("{}  blob\n", sha256_hex(&good));
        let fetcher = FakeFetcher::new();
        fetcher.queue("http://m/blob.gz", &good);
        fetch_with(&fetcher, "http://m", dir.path(), &manifest).unwrap();
        assert_eq!(fetcher.served.borrow().len(), 1);

        // Already present: no network.
        fetch_with(&fetcher, "http://m", dir.path(), &manifest).unwrap();
        assert_eq!(fetcher.served.borrow().len(), 1);

        // Corrupted on disk: one re-download repairs it.
        fs::write(dir.path().join("blob"), b"rot").unwrap();
        fetcher.queue("http://m/blob.gz", &good);
        fetch_with(&fetcher, "http://m", dir.path(), &manifest).unwrap();
        assert_eq!(fs::read(dir.path().join("blob")).unwrap(), good);

        // Remote keeps serving bad bytes: integrity error after one retry.
        fs::write(dir.path().join("blob"), b"rot").unwrap();
        fetcher.queue("http://m/blob.gz", b"evil");
        fetcher.queue("http://m/blob.gz", b"evil");
        let before = fetcher.served.borrow().len();
        let err = fetch_with(&fetcher, "http://m", dir.path(), &manifest).unwrap_err();
        assert!(matches!(err, Error::Integrity { .. }));
        assert_eq!(fetcher.served.borrow().len(), before + 2);

        // No network at all: retryable error.
        let err = fetch_with(&fetcher, "http://m", dir.path(), &manifest).unwrap_err();
        assert!(err.is_retryable());
    }
}
