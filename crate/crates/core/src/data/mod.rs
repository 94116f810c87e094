//! Images, labeled datasets, the `S3CD` dataset file and the per-class
//! embedding table used to pick variances for new classes.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numerics;

pub mod protocol;
pub mod synthetic;

pub use protocol::{ProtocolConfig, SessionPlan, TaskSpec, Variant};
pub use synthetic::{generate_synthetic, GeneratorConfig};

/// A `channels × height × width` grid of pixels in `[0, 1]`, row-major with
/// channels outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl ImageGrid {
    pub fn new(channels: usize, height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config("image dimensions must be positive".into()));
        }
        if height != width {
            return Err(Error::NonSquare { height, width });
        }
        if pixels.len() != channels * height * width {
            return Err(Error::ShapeMismatch {
                expected: format!("{} pixels", channels * height * width),
                found: format!("{} pixels", pixels.len()),
            });
        }
        if let Some(p) = pixels.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Config(format!("pixel value {p} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            pixels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }
    pub fn len(&self) -> usize {
        self.pixels.len()
    }
    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&p| p as f64).collect()
    }

    /// Counter-clockwise rotation by `quarter_turns · 90°`; zero quarter
    /// turns is the identity and the count is taken modulo 4.
    ///
    /// ```
    /// # use s3c::data::ImageGrid;
    /// let img = ImageGrid::new(1, 2, 2, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
    /// assert_eq!(img.rotate(1).unwrap().pixels(), &[0.2, 0.4, 0.1, 0.3]);
    /// ```
    pub fn rotate(&self, quarter_turns: usize) -> Result<ImageGrid> {
        if self.height != self.width {
            return Err(Error::NonSquare {
                height: self.height,
                width: self.width,
            });
        }
        let n = self.width;
        let mut out = self.pixels.clone();
        let mut src = self.pixels.clone();
        for _ in 0..quarter_turns % 4 {
            for c in 0..self.channels {
                let plane = c * n * n;
                // ccw: out[i][j] = src[j][n-1-i]
                for i in 0..n {
                    for j in 0..n {
                        out[plane + i * n + j] = src[plane + j * n + (n - 1 - i)];
                    }
                }
            }
            std::mem::swap(&mut src, &mut out);
        }
        Ok(ImageGrid {
            pixels: src,
            ..*self
        })
    }
}

/// Free-function form of [`ImageGrid::rotate`].
pub fn rotate(img: &ImageGrid, quarter_turns: usize) -> Result<ImageGrid> {
    img.rotate(quarter_turns)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub class_id: u32,
    pub image: ImageGrid,
}

/// A sample placed in a session: `class_id` belongs to the label space of
/// `task_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub image: ImageGrid,
    pub class_id: u32,
    pub task_id: usize,
}

/// One embedding vector per class id `0..len`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClassEmbeddingTable {
    dim: usize,
    vectors: Vec<Vec<f32>>,
}

impl ClassEmbeddingTable {
    pub fn new(dim: usize, vectors: Vec<Vec<f32>>) -> Result<Self> {
        for (class, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::ShapeMismatch {
                    expected: format!("embedding of dim {dim}"),
                    found: format!("class {class} has dim {}", v.len()),
                });
            }
            if dim > 0 && v.iter().all(|&x| x == 0.0) {
                return Err(Error::Config(format!("embedding of class {class} is zero")));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Config(format!(
                    "embedding of class {class} is not finite"
                )));
            }
        }
        Ok(Self { dim, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn len(&self) -> usize {
        self.vectors.len()
    }
    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, class_id: u32) -> Option<&[f32]> {
        if self.dim == 0 {
            return None;
        }
        self.vectors.get(class_id as usize).map(Vec::as_slice)
    }

    /// Cosine similarity of two class embeddings.
    pub fn similarity(&self, a: u32, b: u32) -> Result<f64> {
        let ea = self.get(a).ok_or(Error::MissingEmbedding(a))?;
        let eb = self.get(b).ok_or(Error::MissingEmbedding(b))?;
        let ea: Vec<f64> = ea.iter().map(|&x| x as f64).collect();
        let eb: Vec<f64> = eb.iter().map(|&x| x as f64).collect();
        Ok(numerics::cosine(&ea, &eb)?)
    }
}

/// Train and test splits sharing image dimensions and a class embedding table.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub channels: usize,
    pub size: usize,
    pub class_count: usize,
    pub embeddings: ClassEmbeddingTable,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl Dataset {
    pub fn input_len(&self) -> usize {
        self.channels * self.size * self.size
    }

    pub fn sample_count(&self) -> usize {
        self.train.len() + self.test.len()
    }

    pub fn train_of(&self, class_id: u32) -> impl Iterator<Item = &Sample> {
        self.train.iter().filter(move |s| s.class_id == class_id)
    }

    pub fn test_of(&self, class_id: u32) -> impl Iterator<Item = &Sample> {
        self.test.iter().filter(move |s| s.class_id == class_id)
    }
}

pub const DATASET_MAGIC: &[u8; 4] = b"S3CD";
pub const DATASET_VERSION: u16 = 1;
/// Set on a record's class id when the sample belongs to the test split.
pub const TEST_SPLIT_FLAG: u32 = 1 << 31;

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    let dim16 = |v: usize, what: &str| {
        u16::try_from(v).map_err(|_| Error::Config(format!("{what} {v} does not fit in u16")))
    };
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u16(DATASET_VERSION);
    w.u16(dim16(ds.channels, "channels")?);
    w.u16(dim16(ds.size, "height")?);
    w.u16(dim16(ds.size, "width")?);
    w.u32(ds.class_count as u32);
    w.u32(ds.sample_count() as u32);
    w.u32(ds.embeddings.dim() as u32);
    if ds.embeddings.dim() > 0 {
        for class in 0..ds.class_count as u32 {
            let e = ds
                .embeddings
                .get(class)
                .ok_or(Error::MissingEmbedding(class))?;
            for &x in e {
                w.f32(x);
            }
        }
    }
    let splits = [(&ds.train, 0u32), (&ds.test, TEST_SPLIT_FLAG)];
    for (samples, flag) in splits {
        for s in samples {
            if s.class_id as usize >= ds.class_count || s.class_id & TEST_SPLIT_FLAG != 0 {
                return Err(Error::Config(format!(
                    "class id {} outside 0..{}",
                    s.class_id, ds.class_count
                )));
            }
            w.u32(s.class_id | flag);
            for &p in s.image.pixels() {
                w.f32(p);
            }
        }
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u16()?;
    if version != DATASET_VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let channels = r.u16()? as usize;
    let height = r.u16()? as usize;
    let width = r.u16()? as usize;
    if height != width {
        return r.fail(format!("non-square images {height}x{width}"));
    }
    if channels == 0 || height == 0 {
        return r.fail("zero image dimension");
    }
    let class_count = r.u32()? as usize;
    let sample_count = r.u32()? as usize;
    let emb_dim = r.u32()? as usize;

    let mut vectors = Vec::new();
    if emb_dim > 0 {
        for _ in 0..class_count {
            let v = (0..emb_dim).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
            vectors.push(v);
        }
    }
    let emb_offset = r.offset();
    let embeddings = ClassEmbeddingTable::new(emb_dim, vectors).map_err(|e| Error::Format {
        offset: emb_offset,
        reason: e.to_string(),
    })?;

    let pixel_count = channels * height * width;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for _ in 0..sample_count {
        let record_offset = r.offset();
        let raw = r.u32()?;
        let class_id = raw & !TEST_SPLIT_FLAG;
        if class_id as usize >= class_count {
            return Err(Error::Format {
                offset: record_offset,
                reason: format!("class id {class_id} >= class count {class_count}"),
            });
        }
        let pixels = (0..pixel_count)
            .map(|_| r.f32())
            .collect::<Result<Vec<_>>>()?;
        let image = ImageGrid::new(channels, height, width, pixels).map_err(|e| Error::Format {
            offset: record_offset,
            reason: e.to_string(),
        })?;
        let sample = Sample { class_id, image };
        if raw & TEST_SPLIT_FLAG != 0 {
            test.push(sample);
        } else {
            train.push(sample);
        }
    }
    r.finish()?;
    Ok(Dataset {
        channels,
        size: height,
        class_count,
        embeddings,
        train,
        test,
    })
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&std::fs::read(path)?)
}
