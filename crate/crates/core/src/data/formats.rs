use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Dataset, Difficulty, Split};
use crate::error::{Error, Result};

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;
const CIFAR_TRAIN_FILES: [&str; 5] = ["data_batch_1.bin", "data_batch_2.bin", "data_batch_3.bin", "data_batch_4.bin", "data_batch_5.bin"];
const CIFAR_TEST_FILE: &str = "test_batch.bin";

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn read_file(path: &Path, expected: &str) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::MissingData { path: path.to_path_buf(), expected: expected.to_string() })
        }
        Err(e) => Err(e.into()),
    }
}

/// Parses one CIFAR-10 binary batch. Pixels arrive as three 32×32 planes
/// and are interleaved to HWC.
pub fn load_cifar10_file(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = read_file(path, "a CIFAR-10 binary batch of 3073-byte records")?;
    parse_cifar10(&bytes, &path.display().to_string(), split)
}

pub(crate) fn parse_cifar10(bytes: &[u8], source: &str, split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "{}: {} bytes is not a whole number of {}-byte CIFAR-10 records",
            source,
            bytes.len(),
            CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = vec![0u8; n * 3072];
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("{}: record {} has label {}", source, r, rec[0])));
        }
        labels.push(rec[0]);
        let planes = &rec[1..];
        let dst = &mut images[r * 3072..(r + 1) * 3072];
        for ch in 0..3 {
            for p in 0..1024 {
                dst[p * 3 + ch] = planes[ch * 1024 + p];
            }
        }
    }
    Dataset::new("cifar10", split, [32, 32, 3], 10, images, labels)
}

/// Loads the standard CIFAR-10 binary directory: five training batches or
/// the test batch.
pub fn load_cifar10(dir: &Path, split: Split) -> Result<Dataset> {
    let files: Vec<&str> = match split {
        Split::Train => CIFAR_TRAIN_FILES.to_vec(),
        Split::Test => vec![CIFAR_TEST_FILE],
    };
    let expected = format!("{} in {}", files.join(", "), dir.display());
    let mut all = Vec::new();
    for f in &files {
        let path = dir.join(f);
        all.extend(read_file(&path, &expected)?);
    }
    parse_cifar10(&all, &dir.display().to_string(), split)
}

fn be_u32(bytes: &[u8], at: usize, source: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Data(format!("{}: truncated IDX header", source)))
}

/// Parses an IDX image file and its label file into a 28×28 greyscale dataset.
pub fn load_mnist_idx(images: &Path, labels: &Path, split: Split) -> Result<Dataset> {
    let ib = read_file(images, "an IDX image file (magic 0x00000803)")?;
    let lb = read_file(labels, "an IDX label file (magic 0x00000801)")?;
    parse_mnist(&ib, &lb, &images.display().to_string(), &labels.display().to_string(), split)
}

pub(crate) fn parse_mnist(ib: &[u8], lb: &[u8], isrc: &str, lsrc: &str, split: Split) -> Result<Dataset> {
    let im = be_u32(ib, 0, isrc)?;
    if im != IDX_IMAGES {
        return Err(Error::Data(format!("{}: magic {:#010x} is not an IDX image file ({:#010x})", isrc, im, IDX_IMAGES)));
    }
    let lm = be_u32(lb, 0, lsrc)?;
    if lm != IDX_LABELS {
        return Err(Error::Data(format!("{}: magic {:#010x} is not an IDX label file ({:#010x})", lsrc, lm, IDX_LABELS)));
    }
    let n = be_u32(ib, 4, isrc)? as usize;
    let rows = be_u32(ib, 8, isrc)? as usize;
    let cols = be_u32(ib, 12, isrc)? as usize;
    let nl = be_u32(lb, 4, lsrc)? as usize;
    if n != nl {
        return Err(Error::Data(format!("{} holds {} images but {} holds {} labels", isrc, n, lsrc, nl)));
    }
    let body = &ib[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Data(format!("{}: expected {} pixel bytes, found {}", isrc, n * rows * cols, body.len())));
    }
    let labels = &lb[8..];
    if labels.len() != n {
        return Err(Error::Data(format!("{}: expected {} label bytes, found {}", lsrc, n, labels.len())));
    }
    Dataset::new("mnist", split, [rows, cols, 1], 10, body.to_vec(), labels.to_vec())
}

/// Loads `train-*` or `t10k-*` IDX files from a directory.
pub fn load_mnist(dir: &Path, split: Split) -> Result<Dataset> {
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    load_mnist_idx(
        &dir.join(format!("{}-images-idx3-ubyte", prefix)),
        &dir.join(format!("{}-labels-idx1-ubyte", prefix)),
        split,
    )
}

const CONTAINER_MAGIC: &[u8; 4] = b"DDIS";
const CONTAINER_VERSION: u32 = 1;

/// Writes a dataset as a little-endian header followed by raw label,
/// difficulty and pixel bytes.
///
/// Header: magic `DDIS`, version, count, height, width, channels, classes,
/// split (0 train, 1 test), then the name as a length-prefixed string.
/// Difficulty bytes are 0 (none), 1 (easy) or 2 (hard).
pub fn write_container<W: Write>(ds: &Dataset, mut w: W) -> Result<()> {
    w.write_all(CONTAINER_MAGIC)?;
    let split = match ds.split {
        Split::Train => 0,
        Split::Test => 1,
    };
    for v in [CONTAINER_VERSION, ds.len() as u32, ds.height as u32, ds.width as u32, ds.channels as u32, ds.num_classes as u32, split] {
        w.write_all(&v.to_le_bytes())?;
    }
    w.write_all(&(ds.name.len() as u32).to_le_bytes())?;
    w.write_all(ds.name.as_bytes())?;
    w.write_all(&ds.labels)?;
    let diff: Vec<u8> = match &ds.difficulty {
        Some(d) => d.iter().map(|x| if *x == Difficulty::Easy { 1 } else { 2 }).collect(),
        None => vec![0; ds.len()],
    };
    w.write_all(&diff)?;
    w.write_all(&ds.images)?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R) -> Result<Dataset> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let bad = |m: &str| Error::Data(format!("dataset container: {}", m));
    if bytes.get(..4) != Some(CONTAINER_MAGIC.as_slice()) {
        return Err(bad("bad magic"));
    }
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(4 + 4 * i..8 + 4 * i)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
            .ok_or_else(|| bad("truncated header"))
    };
    if word(0)? != CONTAINER_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (n, h, w, c, classes, split) = (word(1)?, word(2)?, word(3)?, word(4)?, word(5)?, word(6)?);
    let name_len = word(7)?;
    let mut at = 36;
    let take = |at: &mut usize, len: usize| -> Result<&[u8]> {
        let s = bytes.get(*at..*at + len).ok_or_else(|| bad("truncated body"))?;
        *at += len;
        Ok(s)
    };
    let name = String::from_utf8(take(&mut at, name_len)?.to_vec()).map_err(|_| bad("name is not UTF-8"))?;
    let labels = take(&mut at, n)?.to_vec();
    let diff = take(&mut at, n)?.to_vec();
    let images = take(&mut at, n * h * w * c)?.to_vec();
    if at != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    let split = if split == 0 { Split::Train } else { Split::Test };
    let mut ds = Dataset::new(name, split, [h, w, c], classes, images, labels)?;
    if diff.iter().any(|&d| d != 0) {
        let d = diff
            .iter()
            .map(|&d| match d {
                1 => Ok(Difficulty::Easy),
                2 => Ok(Difficulty::Hard),
                _ => Err(bad("invalid difficulty byte")),
            })
            .collect::<Result<Vec<_>>>()?;
        ds.difficulty = Some(d);
        ds.validate()?;
    }
    Ok(ds)
}
