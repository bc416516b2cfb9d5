use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Lines, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::text::{tokenize, Embeddings};
use super::{Dataset, DatasetMeta, ImageGrid, QuestionType, VqaSample, MAX_CELLS, NUM_ANSWERS};
use crate::binio;
use crate::error::{bail, Error, Result};
use crate::numcore::Tensor;

const FEATURE_MAGIC: &[u8; 4] = b"MHFG";
const PRIOR_MAGIC: &[u8; 4] = b"MHPR";

/// One line of a questions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub id: u32,
    pub q: String,
    pub answers: Vec<String>,
    pub image: u32,
    pub qtype: QuestionType,
}

/// Streams question records, validating each one.
pub struct QuestionReader<R: BufRead> {
    lines: Lines<R>,
    index: usize,
}

impl<R: BufRead> QuestionReader<R> {
    pub fn new(r: R) -> Self {
        QuestionReader { lines: r.lines(), index: 0 }
    }
}

impl<R: BufRead> Iterator for QuestionReader<R> {
    type Item = Result<QuestionRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let line = match self.lines.next()? {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            let i = self.index;
            self.index += 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: QuestionRecord = match serde_json::from_str(&line) {
                Ok(r) => r,
                Err(e) => return Some(Err(Error::Data(format!("question record {i}: {e}")))),
            };
            if rec.answers.len() != NUM_ANSWERS {
                return Some(Err(Error::Data(format!(
                    "question record {i}: {} answers, expected {NUM_ANSWERS}",
                    rec.answers.len()
                ))));
            }
            if tokenize(&rec.q).is_empty() {
                return Some(Err(Error::Data(format!("question record {i}: empty question"))));
            }
            return Some(Ok(rec));
        }
    }
}

pub fn read_questions(path: &Path) -> Result<Vec<QuestionRecord>> {
    QuestionReader::new(BufReader::new(File::open(path)?)).collect()
}

pub fn write_questions(w: &mut impl Write, samples: &[VqaSample]) -> Result<()> {
    for s in samples {
        let rec = QuestionRecord {
            id: s.id,
            q: s.question.clone(),
            answers: s.answers.clone(),
            image: s.image,
            qtype: s.qtype,
        };
        serde_json::to_writer(&mut *w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn write_features<'a>(w: &mut impl Write, images: impl ExactSizeIterator<Item = &'a ImageGrid>) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    binio::write_u32(w, binio::to_u32(images.len(), "image count")?)?;
    for img in images {
        binio::write_u32(w, img.id)?;
        binio::write_u32(w, binio::to_u32(img.rows, "rows")?)?;
        binio::write_u32(w, binio::to_u32(img.cols, "cols")?)?;
        binio::write_u32(w, binio::to_u32(img.features.cols(), "d_x")?)?;
        let vals: Vec<f32> = img.features.data().iter().map(|&v| v as f32).collect();
        binio::write_f32s(w, &vals)?;
    }
    Ok(())
}

pub fn read_features(r: &mut impl Read) -> Result<BTreeMap<u32, ImageGrid>> {
    const WHAT: &str = "feature file";
    binio::read_magic(r, FEATURE_MAGIC, WHAT)?;
    let count = binio::read_u32(r, WHAT)?;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let id = binio::read_u32(r, WHAT)?;
        let rows = binio::read_u32(r, WHAT)? as usize;
        let cols = binio::read_u32(r, WHAT)? as usize;
        let d = binio::read_u32(r, WHAT)? as usize;
        let m = rows * cols;
        if m == 0 || m > MAX_CELLS || d == 0 {
            bail!(Format, "image {}: grid {}x{} of width {} outside 1..={} cells", id, rows, cols, d, MAX_CELLS);
        }
        let vals = binio::read_f32s(r, m * d, WHAT)?;
        let features = Tensor::new(vec![m, d], vals.into_iter().map(f64::from).collect())?;
        if out
            .insert(
                id,
                ImageGrid {
                    id,
                    rows,
                    cols,
                    features: Arc::new(features),
                },
            )
            .is_some()
        {
            bail!(Format, "image {} appears twice", id);
        }
    }
    binio::expect_eof(r, WHAT)?;
    Ok(out)
}

/// A prior keyed by question id; `rows×cols` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorEntry {
    pub id: u32,
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
}

pub fn write_priors(w: &mut impl Write, entries: &[PriorEntry]) -> Result<()> {
    w.write_all(PRIOR_MAGIC)?;
    binio::write_u32(w, binio::to_u32(entries.len(), "prior count")?)?;
    for e in entries {
        binio::write_u32(w, e.id)?;
        binio::write_u32(w, binio::to_u32(e.rows, "rows")?)?;
        binio::write_u32(w, binio::to_u32(e.cols, "cols")?)?;
        binio::write_u32(w, 1)?;
        let vals: Vec<f32> = e.weights.iter().map(|&v| v as f32).collect();
        binio::write_f32s(w, &vals)?;
    }
    Ok(())
}

pub fn read_priors(r: &mut impl Read) -> Result<HashMap<u32, PriorEntry>> {
    const WHAT: &str = "prior file";
    binio::read_magic(r, PRIOR_MAGIC, WHAT)?;
    let count = binio::read_u32(r, WHAT)?;
    let mut out = HashMap::new();
    for _ in 0..count {
        let id = binio::read_u32(r, WHAT)?;
        let rows = binio::read_u32(r, WHAT)? as usize;
        let cols = binio::read_u32(r, WHAT)? as usize;
        let d = binio::read_u32(r, WHAT)? as usize;
        if d != 1 {
            bail!(Format, "prior {} has width {}, expected 1", id, d);
        }
        let n = rows * cols;
        if n == 0 || n > MAX_CELLS {
            bail!(Format, "prior {} has {} positions", id, n);
        }
        let weights: Vec<f64> = binio::read_f32s(r, n, WHAT)?.into_iter().map(f64::from).collect();
        if let Some(bad) = weights.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            bail!(Format, "prior {} has weight {}", id, bad);
        }
        if out.insert(id, PriorEntry { id, rows, cols, weights }).is_some() {
            bail!(Format, "prior {} appears twice", id);
        }
    }
    binio::expect_eof(r, WHAT)?;
    Ok(out)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

/// Writes every dataset file into `dir` (created if needed).
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (name, split) in [("train.jsonl", &ds.train), ("val.jsonl", &ds.val)] {
        let mut w = create(dir, name)?;
        write_questions(&mut w, split)?;
        w.flush()?;
    }
    let mut w = create(dir, "features.bin")?;
    write_features(&mut w, ds.images.values())?;
    w.flush()?;
    let all = || ds.train.iter().chain(&ds.val);
    let text: Vec<PriorEntry> = all()
        .filter_map(|s| {
            s.text_prior.as_ref().map(|p| PriorEntry {
                id: s.id,
                rows: 1,
                cols: p.len(),
                weights: p.clone(),
            })
        })
        .collect();
    let mut image = Vec::new();
    for s in all() {
        if let Some(p) = &s.image_prior {
            let Some(img) = ds.images.get(&s.image) else {
                bail!(Data, "sample {} refers to missing image {}", s.id, s.image);
            };
            image.push(PriorEntry {
                id: s.id,
                rows: img.rows,
                cols: img.cols,
                weights: p.clone(),
            });
        }
    }
    for (name, entries) in [("text_priors.bin", &text), ("image_priors.bin", &image)] {
        let mut w = create(dir, name)?;
        write_priors(&mut w, entries)?;
        w.flush()?;
    }
    ds.embeddings.save(&dir.join("embeddings.tsv"))?;
    let mut w = create(dir, "answers.txt")?;
    for a in &ds.answers {
        writeln!(w, "{a}")?;
    }
    w.flush()?;
    let mut w = create(dir, "meta.json")?;
    serde_json::to_writer_pretty(&mut w, &ds.meta)?;
    w.write_all(b"\n")?;
    Ok(w.flush()?)
}

fn open(dir: &Path, name: &str) -> Result<BufReader<File>> {
    let p = dir.join(name);
    File::open(&p)
        .map(BufReader::new)
        .map_err(|e| Error::Data(format!("{}: {e}", p.display())))
}

/// Loads and cross-checks every dataset file in `dir`. Prior files are
/// optional.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_reader(open(dir, "meta.json")?)?;
    let answers: Vec<String> = open(dir, "answers.txt")?
        .lines()
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|l| !l.trim().is_empty())
        .collect();
    let embeddings = Embeddings::read_tsv(open(dir, "embeddings.tsv")?)?;
    if embeddings.dim() != meta.d_emb {
        bail!(Data, "embedding width {} but meta says {}", embeddings.dim(), meta.d_emb);
    }
    let images = read_features(&mut open(dir, "features.bin")?)?;
    let load_priors = |name: &str| -> Result<Option<HashMap<u32, PriorEntry>>> {
        if dir.join(name).exists() {
            Ok(Some(read_priors(&mut open(dir, name)?)?))
        } else {
            Ok(None)
        }
    };
    let text = load_priors("text_priors.bin")?;
    let image = load_priors("image_priors.bin")?;
    let mut seen = HashSet::new();
    let mut split = |name: &str| -> Result<Vec<VqaSample>> {
        let mut out = Vec::new();
        for rec in QuestionReader::new(open(dir, name)?) {
            let rec = rec.map_err(|e| Error::Data(format!("{name}: {e}")))?;
            if !seen.insert(rec.id) {
                bail!(Data, "{}: question id {} is not unique", name, rec.id);
            }
            let Some(img) = images.get(&rec.image) else {
                bail!(Data, "{}: question {} refers to missing image {}", name, rec.id, rec.image);
            };
            if img.features.cols() != meta.d_x {
                bail!(Data, "image {} has width {}, meta says {}", img.id, img.features.cols(), meta.d_x);
            }
            let n_tok = tokenize(&rec.q).len().min(super::MAX_TOKENS);
            let text_prior = match text.as_ref().and_then(|t| t.get(&rec.id)) {
                Some(p) if p.weights.len() != n_tok => {
                    bail!(Data, "question {}: text prior of length {} for {} tokens", rec.id, p.weights.len(), n_tok)
                }
                p => p.map(|p| p.weights.clone()),
            };
            let image_prior = match image.as_ref().and_then(|t| t.get(&rec.id)) {
                Some(p) if (p.rows, p.cols) != (img.rows, img.cols) => {
                    bail!(Data, "question {}: image prior grid {}x{} differs from image grid", rec.id, p.rows, p.cols)
                }
                p => p.map(|p| p.weights.clone()),
            };
            out.push(VqaSample {
                id: rec.id,
                question: rec.q,
                answers: rec.answers,
                image: rec.image,
                qtype: rec.qtype,
                text_prior,
                image_prior,
            });
        }
        Ok(out)
    };
    let train = split("train.jsonl")?;
    let val = split("val.jsonl")?;
    Ok(Dataset {
        meta,
        answers,
        embeddings,
        images,
        train,
        val,
    })
}
