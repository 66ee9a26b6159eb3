#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use topo_core::data::{encode_cifar_batch, encode_idx_images, encode_idx_labels};

/// Deterministic pseudo-random bytes.
pub fn bytes(n: usize, seed: u64) -> Vec<u8> {
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 56) as u8
        })
        .collect()
}

/// Writes a small MNIST-format dataset; gzips it when `gz`.
pub fn write_mnist(dir: &Path, train: usize, test: usize, gz: bool) {
    std::fs::create_dir_all(dir).unwrap();
    for (prefix, n, seed) in [("train", train, 1), ("t10k", test, 2)] {
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        let files = [
            (format!("{prefix}-images-idx3-ubyte"), encode_idx_images(n, 28, 28, &bytes(n * 784, seed))),
            (format!("{prefix}-labels-idx1-ubyte"), encode_idx_labels(&labels)),
        ];
        for (name, data) in files {
            if gz {
                let mut e = GzEncoder::new(Vec::new(), flate2::Compression::fast());
                e.write_all(&data).unwrap();
                std::fs::write(dir.join(format!("{name}.gz")), e.finish().unwrap()).unwrap();
            } else {
                std::fs::write(dir.join(name), data).unwrap();
            }
        }
    }
}

pub fn write_cifar_test(dir: &Path, records: &[(u8, Vec<u8>)]) {
    std::fs::create_dir_all(dir).unwrap();
    let refs: Vec<(u8, &[u8])> = records.iter().map(|(l, p)| (*l, &p[..])).collect();
    std::fs::write(dir.join("test_batch.bin"), encode_cifar_batch(&refs)).unwrap();
}
