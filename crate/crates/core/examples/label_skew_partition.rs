//! One-digit-per-client partition of the MNIST training set.
//!
//! Expects the IDX files in `$FEDLORA_DATA_DIR` (default `data/mnist`);
//! pass `--fetch` to download them first.

use fedlora::config::default_data_dir;
use fedlora::data;

fn main() -> fedlora::Result<()> {
    let dir = default_data_dir();
    if std::env::args().any(|a| a == "--fetch") {
        data::fetch_mnist(data::DEFAULT_MIRROR, &dir)?;
    }
    let (train, test) = data::load_mnist(&dir)?;
    println!("train {} / test {}", train.len(), test.len());
    for shard in data::partition_by_label(&train, 10)? {
        let (x, _) = train.gather(&shard.indices[..1]);
        let ink = x.as_slice().iter().filter(|&&p| p > 0.5).count();
        println!("client {}: {} samples (first image has {ink} bright pixels)", shard.client_id, shard.len());
    }
    Ok(())
}
