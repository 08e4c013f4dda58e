//! Tab-separated input parsers and the binary embedding format.
//!
//! Matrix files start with a 25-byte header:
//!
//! | bytes | content                                         |
//! |-------|-------------------------------------------------|
//! | 0..8  | magic `SEMKGE1\0`                               |
//! | 8..16 | rows, u64 little-endian                         |
//! | 16..24| cols (embedding dimension), u64 little-endian   |
//! | 24    | dtype tag: 0 = real f64, 1 = complex as f64 pairs |
//!
//! followed by the row-major payload of little-endian f64 values; complex
//! rows hold `cols` interleaved (re, im) pairs.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::{Dtype, EmbeddingTable};
use crate::ontology::{BuildReport, ClassHierarchy};
use crate::store::{Dictionary, RawTriple, TripleStore};

pub const MAGIC: &[u8; 8] = b"SEMKGE1\0";
pub const HEADER_LEN: usize = 25;

pub const ENTITY_MATRIX: &str = "entities.bin";
pub const RELATION_MATRIX: &str = "relations.bin";
pub const ENTITY_DICT: &str = "entities.tsv";
pub const RELATION_DICT: &str = "relations.tsv";

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

/// Splits each non-blank line on tabs, trims the fields, and hands them to
/// `f` with the 1-based line number.
fn for_each_record<R: BufRead>(
    reader: R,
    path: &Path,
    mut f: impl FnMut(usize, Vec<&str>) -> Result<()>,
) -> Result<()> {
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        f(i + 1, fields)?;
    }
    Ok(())
}

fn field_error(path: &Path, line: usize, expected: usize, found: usize) -> Error {
    Error::Parse {
        path: path.to_owned(),
        line,
        message: format!("expected {expected} tab-separated fields, found {found}"),
    }
}

pub fn read_triples<R: BufRead>(reader: R, path: &Path) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for_each_record(reader, path, |line, f| match f.as_slice() {
        [h, r, t] => {
            out.push((h.to_string(), r.to_string(), t.to_string()));
            Ok(())
        }
        _ => Err(field_error(path, line, 3, f.len())),
    })?;
    Ok(out)
}

/// `head TAB relation TAB tail` per line; blank lines are skipped.
pub fn parse_triple_file(path: impl AsRef<Path>) -> Result<Vec<RawTriple>> {
    let path = path.as_ref();
    read_triples(open(path)?, path)
}

fn read_pairs<R: BufRead>(reader: R, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for_each_record(reader, path, |line, f| match f.as_slice() {
        [a, b] => {
            out.push((a.to_string(), b.to_string()));
            Ok(())
        }
        _ => Err(field_error(path, line, 2, f.len())),
    })?;
    Ok(out)
}

/// `entity TAB class` per line. Duplicates and multiple classes per entity
/// are kept as written.
pub fn parse_type_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    read_pairs(open(path)?, path)
}

pub fn read_hierarchy<R: BufRead>(reader: R, path: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for_each_record(reader, path, |line, f| match f.as_slice() {
        [sub, sup] if sub == sup => Err(Error::SelfSubclass {
            path: path.to_owned(),
            line,
            class: sub.to_string(),
        }),
        [sub, sup] => {
            out.push((sub.to_string(), sup.to_string()));
            Ok(())
        }
        _ => Err(field_error(path, line, 2, f.len())),
    })?;
    Ok(out)
}

/// `subclass TAB superclass` per line.
pub fn parse_hierarchy_file(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    read_hierarchy(open(path)?, path)
}

/// Locations of one benchmark's files.
#[derive(Clone, Debug, Default)]
pub struct DatasetLayout {
    pub train_path: PathBuf,
    pub valid_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub type_assertions_path: Option<PathBuf>,
    pub hierarchy_path: Option<PathBuf>,
}

impl DatasetLayout {
    /// Conventional layout of a dataset directory: `train.txt`, `valid.txt`,
    /// `test.txt`, `entity_types.tsv`, `class_hierarchy.tsv`. Optional files
    /// are only recorded if they exist.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let existing = |name: &str| Some(dir.join(name)).filter(|p| p.exists());
        DatasetLayout {
            train_path: dir.join("train.txt"),
            valid_path: existing("valid.txt"),
            test_path: existing("test.txt"),
            type_assertions_path: existing("entity_types.tsv"),
            hierarchy_path: existing("class_hierarchy.tsv"),
        }
    }

    pub fn load_store(&self) -> Result<TripleStore> {
        let train = parse_triple_file(&self.train_path)?;
        let load_opt = |p: &Option<PathBuf>| match p {
            Some(p) => parse_triple_file(p),
            None => Ok(Vec::new()),
        };
        let valid = load_opt(&self.valid_path)?;
        let test = load_opt(&self.test_path)?;
        Ok(TripleStore::from_splits(&train, &valid, &test))
    }

    /// Builds the class hierarchy if a type assertion file is present. A
    /// missing subclass file yields a flat hierarchy.
    pub fn load_hierarchy(&self, entities: &Dictionary) -> Result<Option<(ClassHierarchy, BuildReport)>> {
        let Some(types) = &self.type_assertions_path else {
            return Ok(None);
        };
        let assertions = parse_type_file(types)?;
        let edges = match &self.hierarchy_path {
            Some(p) => parse_hierarchy_file(p)?,
            None => Vec::new(),
        };
        ClassHierarchy::build(&assertions, &edges, entities).map(Some)
    }

    pub fn input_paths(&self) -> Vec<&Path> {
        std::iter::once(self.train_path.as_path())
            .chain(
                [&self.valid_path, &self.test_path, &self.type_assertions_path, &self.hierarchy_path]
                    .into_iter()
                    .flatten()
                    .map(PathBuf::as_path),
            )
            .collect()
    }
}

pub fn write_matrix<W: Write>(mut w: W, dtype: Dtype, dim: usize, data: &[f64]) -> std::io::Result<()> {
    let width = dim * dtype.lanes();
    let rows = data.len().checked_div(width).unwrap_or(0);
    w.write_all(MAGIC)?;
    w.write_all(&(rows as u64).to_le_bytes())?;
    w.write_all(&(dim as u64).to_le_bytes())?;
    w.write_all(&[match dtype {
        Dtype::Real => 0u8,
        Dtype::Complex => 1u8,
    }])?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()
}

/// Reads one matrix file, returning dtype, dimension, row count and payload.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<(Dtype, usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let corrupt = |message: String| Error::Corrupt { path: path.to_owned(), message };
    let mut bytes = Vec::new();
    open(path)?.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(corrupt("missing SEMKGE1 header".into()));
    }
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let dim = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let dtype = match bytes[24] {
        0 => Dtype::Real,
        1 => Dtype::Complex,
        tag => return Err(corrupt(format!("unknown dtype tag {tag}"))),
    };
    let expected = rows
        .checked_mul(dim * dtype.lanes() * 8)
        .ok_or_else(|| corrupt("header sizes overflow".into()))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(corrupt(format!("payload is {} bytes, header implies {expected}", payload.len())));
    }
    let data = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((dtype, dim, rows, data))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn write_matrix_file(path: &Path, dtype: Dtype, dim: usize, data: &[f64]) -> Result<()> {
    write_file(path, |w| write_matrix(w, dtype, dim, data))
}

pub fn write_dictionary(path: &Path, dict: &Dictionary) -> Result<()> {
    write_file(path, |w| {
        for (id, name) in dict.names().iter().enumerate() {
            writeln!(w, "{id}\t{name}")?;
        }
        Ok(())
    })
}

pub fn read_dictionary(path: impl AsRef<Path>) -> Result<Dictionary> {
    let path = path.as_ref();
    let mut dict = Dictionary::new();
    for_each_record(open(path)?, path, |line, f| {
        let bad = |message: &str| Error::Parse { path: path.to_owned(), line, message: message.into() };
        match f.as_slice() {
            [id, name] => {
                let id: usize = id.parse().map_err(|_| bad("id is not an integer"))?;
                if id != dict.len() || dict.id(name).is_some() {
                    return Err(bad("ids must be dense, ordered and unique"));
                }
                dict.get_or_insert(name);
                Ok(())
            }
            _ => Err(field_error(path, line, 2, f.len())),
        }
    })?;
    Ok(dict)
}

/// Writes both matrices and both dictionaries into `dir`.
pub fn write_embeddings(
    table: &EmbeddingTable,
    entities: &Dictionary,
    relations: &Dictionary,
    dir: impl AsRef<Path>,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_matrix_file(&dir.join(ENTITY_MATRIX), table.dtype(), table.dim(), table.entity_matrix())?;
    write_matrix_file(&dir.join(RELATION_MATRIX), table.dtype(), table.dim(), table.relation_matrix())?;
    write_dictionary(&dir.join(ENTITY_DICT), entities)?;
    write_dictionary(&dir.join(RELATION_DICT), relations)
}

pub fn read_table(dir: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let dir = dir.as_ref();
    let (dt_e, dim_e, _, ents) = read_matrix(dir.join(ENTITY_MATRIX))?;
    let (dt_r, dim_r, _, rels) = read_matrix(dir.join(RELATION_MATRIX))?;
    if dim_e != dim_r {
        return Err(Error::DimMismatch { expected: dim_e, found: dim_r });
    }
    if dt_e != dt_r {
        return Err(Error::Corrupt {
            path: dir.join(RELATION_MATRIX),
            message: "dtype differs from entity matrix".into(),
        });
    }
    EmbeddingTable::from_parts(dt_e, dim_e, ents, rels)
}

/// Reads a table and dictionaries written by [`write_embeddings`].
pub fn read_embeddings(dir: impl AsRef<Path>) -> Result<(EmbeddingTable, Dictionary, Dictionary)> {
    let dir = dir.as_ref();
    let table = read_table(dir)?;
    let entities = read_dictionary(dir.join(ENTITY_DICT))?;
    let relations = read_dictionary(dir.join(RELATION_DICT))?;
    if entities.len() != table.num_entities() || relations.len() != table.num_relations() {
        return Err(Error::Corrupt {
            path: dir.to_owned(),
            message: "dictionary sizes do not match matrix rows".into(),
        });
    }
    Ok((table, entities, relations))
}
