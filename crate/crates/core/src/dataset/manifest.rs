//! Delimited manifest files.
//!
//! ```text
//! # k=10
//! # k_sub=50
//! # shape=32
//! # taxonomy=taxonomy.csv
//! id,payload,y,y_sub,h,fold,gender,age
//! img0001,features.csv#0,3,12,3,train,F,61
//! ```
//!
//! Header lines are `# key=value`. `payload` is a path relative to the manifest
//! directory; `file#row` addresses one row of a headerless numeric CSV bank, a plain
//! path names an image (PNG) or a single-row vector file. Completed manifests add
//! `h_source`, `h_bin_hat` and `confidence`. Unknown columns are kept as metadata.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dataset::{Class, Dataset, Example, Fold, PayloadShape, Provenance, TaxonomyMap};
use crate::error::{Error, Result};

/// Environment variable naming the directory relative data paths fall back to.
pub const DATA_ROOT_ENV: &str = "L2D_DATA_ROOT";

const KNOWN: &[&str] = &[
    "id",
    "payload",
    "y",
    "y_sub",
    "h",
    "fold",
    "h_source",
    "h_bin_hat",
    "confidence",
];

/// Resolves `path` against the working directory, then against `$L2D_DATA_ROOT`.
pub fn resolve_data_path(path: &Path) -> PathBuf {
    if path.is_absolute() || path.exists() {
        return path.to_path_buf();
    }
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(root) => {
            let candidate = Path::new(&root).join(path);
            if candidate.exists() {
                candidate
            } else {
                path.to_path_buf()
            }
        }
        None => path.to_path_buf(),
    }
}

struct Header {
    k: usize,
    k_sub: Option<usize>,
    shape: PayloadShape,
    taxonomy: Option<String>,
}

fn parse_header(path: &Path, lines: &[(usize, &str)]) -> Result<Header> {
    let mut fields = HashMap::new();
    for &(line_no, line) in lines {
        let body = line.trim_start_matches('#').trim();
        if body.is_empty() {
            continue;
        }
        let Some((key, value)) = body.split_once('=') else {
            continue;
        };
        fields.insert(key.trim().to_string(), (line_no, value.trim().to_string()));
    }
    let get = |key: &str| -> Result<(usize, String)> {
        fields.get(key).cloned().ok_or_else(|| Error::Parse {
            path: path.into(),
            row: 1,
            msg: format!("header is missing `{key}`"),
        })
    };
    let (line, k) = get("k")?;
    let k = k.parse().ok().filter(|k| *k >= 1).ok_or_else(|| Error::Parse {
        path: path.into(),
        row: line,
        msg: format!("bad class count `{k}`"),
    })?;
    let (line, shape) = get("shape")?;
    let shape = PayloadShape::parse(&shape).ok_or_else(|| Error::Parse {
        path: path.into(),
        row: line,
        msg: format!("bad payload shape `{shape}`"),
    })?;
    let k_sub = match fields.get("k_sub") {
        Some((line, v)) => Some(v.parse().map_err(|_| Error::Parse {
            path: path.into(),
            row: *line,
            msg: format!("bad subclass count `{v}`"),
        })?),
        None => None,
    };
    Ok(Header {
        k,
        k_sub,
        shape,
        taxonomy: fields.get("taxonomy").map(|(_, v)| v.clone()),
    })
}

fn load_taxonomy(path: &Path, k: usize) -> Result<TaxonomyMap> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Parse {
                path: path.into(),
                row: 0,
                msg: format!("{other:?}"),
            },
        })?;
    let mut pairs = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 2;
        let field = |j: usize| -> Result<usize> {
            record
                .get(j)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse {
                    path: path.into(),
                    row,
                    msg: "expected `subclass,superclass` as 1-based integers".into(),
                })
        };
        pairs.push((field(0)?, field(1)?));
    }
    pairs.sort();
    let mut map = Vec::with_capacity(pairs.len());
    for (expected, (sub, sup)) in pairs.into_iter().enumerate() {
        if sub != expected + 1 {
            return Err(Error::Integrity(format!(
                "taxonomy {} must list subclasses 1..=k_sub exactly once",
                path.display()
            )));
        }
        map.push(Class::from_one_based(sup).ok_or_else(|| {
            Error::Integrity(format!("subclass {sub} maps to superclass 0"))
        })?);
    }
    TaxonomyMap::new(map, k)
}

/// Reads payload files, caching multi-row banks.
struct PayloadReader<'a> {
    root: &'a Path,
    shape: PayloadShape,
    banks: HashMap<PathBuf, Vec<Vec<f64>>>,
}

impl PayloadReader<'_> {
    fn read(&mut self, reference: &str) -> std::result::Result<Vec<f64>, String> {
        let (file, row) = match reference.rsplit_once('#') {
            Some((file, row)) => (
                file,
                Some(
                    row.parse::<usize>()
                        .map_err(|_| format!("bad bank row in `{reference}`"))?,
                ),
            ),
            None => (reference, None),
        };
        let path = self.root.join(file);
        if !path.exists() {
            return Err(format!("payload {} does not exist", path.display()));
        }
        let values = match row {
            Some(row) => {
                if !self.banks.contains_key(&path) {
                    let bank = read_numeric_rows(&path)?;
                    self.banks.insert(path.clone(), bank);
                }
                self.banks[&path]
                    .get(row)
                    .cloned()
                    .ok_or_else(|| format!("{} has no row {row}", path.display()))?
            }
            None if is_image(&path) => read_image(&path, self.shape)?,
            None => read_numeric_rows(&path)?
                .into_iter()
                .next()
                .ok_or_else(|| format!("{} is empty", path.display()))?,
        };
        if values.len() != self.shape.len() {
            return Err(format!(
                "payload `{reference}` has {} values, expected {}",
                values.len(),
                self.shape.len()
            ));
        }
        Ok(values)
    }
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png")
    )
}

fn read_numeric_rows(path: &Path) -> std::result::Result<Vec<Vec<f64>>, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            line.split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| format!("{}: bad number `{t}`", path.display()))
                })
                .collect()
        })
        .collect()
}

fn read_image(path: &Path, shape: PayloadShape) -> std::result::Result<Vec<f64>, String> {
    let PayloadShape::Image {
        height,
        width,
        channels,
    } = shape
    else {
        return Err(format!(
            "{} is an image but the manifest declares feature payloads",
            path.display()
        ));
    };
    let img = image::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let img = if img.width() as usize != width || img.height() as usize != height {
        img.resize_exact(
            width as u32,
            height as u32,
            image::imageops::FilterType::Triangle,
        )
    } else {
        img
    };
    let raw: Vec<u8> = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        c => return Err(format!("unsupported channel count {c}")),
    };
    Ok(raw.into_iter().map(|v| f64::from(v) / 255.0).collect())
}

/// Loads and validates a manifest. Examples come back sorted by id.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let path = resolve_data_path(path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();

    let mut header_lines = Vec::new();
    let mut body_start = 0;
    for (i, line) in text.lines().enumerate() {
        if line.starts_with('#') {
            header_lines.push((i + 1, line));
            body_start = i + 1;
        } else if line.trim().is_empty() && body_start == i {
            body_start = i + 1;
        } else {
            break;
        }
    }
    let header = parse_header(&path, &header_lines)?;
    let taxonomy = match &header.taxonomy {
        Some(file) => load_taxonomy(&root.join(file), header.k)?,
        None => TaxonomyMap::identity(header.k),
    };
    if let Some(k_sub) = header.k_sub {
        if k_sub != taxonomy.k_sub() {
            return Err(Error::Integrity(format!(
                "header declares k_sub={k_sub}, taxonomy has {}",
                taxonomy.k_sub()
            )));
        }
    }

    let body: String = text
        .lines()
        .skip(body_start)
        .collect::<Vec<_>>()
        .join("\n");
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let columns: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let col = |name: &str| columns.iter().position(|c| c == name);
    let (Some(id_col), Some(payload_col), Some(y_col)) = (col("id"), col("payload"), col("y"))
    else {
        return Err(Error::Parse {
            path: path.clone(),
            row: body_start + 1,
            msg: "columns `id`, `payload` and `y` are required".into(),
        });
    };
    let meta_cols: Vec<(usize, &String)> = columns
        .iter()
        .enumerate()
        .filter(|(_, c)| !KNOWN.contains(&c.as_str()))
        .collect();

    let mut payloads = PayloadReader {
        root: &root,
        shape: header.shape,
        banks: HashMap::new(),
    };
    let mut examples = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row = body_start + record.position().map_or(0, |p| p.line() as usize);
        let parse_err = |msg: String| Error::Parse {
            path: path.clone(),
            row,
            msg,
        };
        let field = |c: Option<usize>| c.and_then(|c| record.get(c)).filter(|v| !v.is_empty());
        let class = |name: &str, value: &str, bound: usize| -> Result<Class> {
            let v: usize = value
                .parse()
                .map_err(|_| parse_err(format!("{name} `{value}` is not an integer")))?;
            match Class::from_one_based(v) {
                Some(c) if c.index() < bound => Ok(c),
                _ => Err(Error::Integrity(format!(
                    "row {row}: {name}={v} outside 1..={bound}"
                ))),
            }
        };

        let id = field(Some(id_col))
            .ok_or_else(|| parse_err("empty id".into()))?
            .to_string();
        let y = class(
            "y",
            field(Some(y_col)).ok_or_else(|| parse_err("missing y".into()))?,
            header.k,
        )?;
        let y_sub = field(col("y_sub"))
            .map(|v| class("y_sub", v, taxonomy.k_sub()).map(Class::index))
            .transpose()?;
        let h = field(col("h"))
            .map(|v| class("h", v, header.k))
            .transpose()?;
        let fold = match field(col("fold")) {
            None => None,
            Some("train") => Some(Fold::Train),
            Some("test") => Some(Fold::Test),
            Some(other) => return Err(parse_err(format!("unknown fold `{other}`"))),
        };
        let provenance = match field(col("h_source")) {
            None => h.map(|_| Provenance::Real),
            Some("real") => Some(Provenance::Real),
            Some("artificial") => {
                let correct = match field(col("h_bin_hat")) {
                    Some("1") => true,
                    Some("0") => false,
                    other => {
                        return Err(parse_err(format!("bad h_bin_hat {other:?}")));
                    }
                };
                let confidence: f64 = field(col("confidence"))
                    .and_then(|v| v.parse().ok())
                    .filter(|c: &f64| (0.0..=1.0).contains(c))
                    .ok_or_else(|| parse_err("confidence must be in [0,1]".into()))?;
                Some(Provenance::Artificial {
                    correct,
                    confidence,
                })
            }
            Some(other) => return Err(parse_err(format!("unknown h_source `{other}`"))),
        };
        let source = field(Some(payload_col))
            .ok_or_else(|| parse_err("missing payload".into()))?
            .to_string();
        let payload = payloads.read(&source).map_err(|msg| Error::Integrity(format!("row {row}: {msg}")))?;
        let meta = meta_cols
            .iter()
            .filter_map(|(c, name)| {
                record
                    .get(*c)
                    .filter(|v| !v.is_empty())
                    .map(|v| ((*name).clone(), v.to_string()))
            })
            .collect();
        examples.push(Example {
            id,
            payload,
            source,
            y,
            y_sub,
            h,
            provenance,
            fold,
            meta,
        });
    }
    Dataset::new(examples, taxonomy, header.shape, root)
}

/// Writes `dataset` as a manifest at `path`.
///
/// Payload references are rewritten to absolute paths when the manifest moves away from
/// the dataset root. Examples without a reference get their payloads written to a
/// `<stem>.payloads.csv` bank beside the manifest.
pub fn save_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("manifest")
        .to_string();
    let same_root = same_dir(dataset.root(), &dir);

    let taxonomy = dataset.taxonomy();
    let identity = taxonomy.k_sub() == taxonomy.k()
        && (0..taxonomy.k_sub()).all(|s| taxonomy.superclass(s).index() == s);
    let mut out = String::new();
    out.push_str(&format!("# k={}\n", dataset.k()));
    out.push_str(&format!("# k_sub={}\n", taxonomy.k_sub()));
    out.push_str(&format!("# shape={}\n", dataset.shape()));
    if !identity {
        let tax_name = format!("{stem}.taxonomy.csv");
        let mut tax = String::from("subclass,superclass\n");
        for s in 0..taxonomy.k_sub() {
            tax.push_str(&format!("{},{}\n", s + 1, taxonomy.superclass(s)));
        }
        let tax_path = dir.join(&tax_name);
        fs::write(&tax_path, tax).map_err(|e| Error::io(&tax_path, e))?;
        out.push_str(&format!("# taxonomy={tax_name}\n"));
    }

    let examples = dataset.examples();
    let mut meta_keys: Vec<&String> = examples.iter().flat_map(|e| e.meta.keys()).collect();
    meta_keys.sort();
    meta_keys.dedup();
    let has_sub = examples.iter().any(|e| e.y_sub.is_some());
    let has_fold = examples.iter().any(|e| e.fold.is_some());
    let has_artificial = examples
        .iter()
        .any(|e| matches!(e.provenance, Some(Provenance::Artificial { .. })));

    let bank_name = format!("{stem}.payloads.csv");
    let mut bank = String::new();
    let mut bank_rows = 0usize;

    let mut writer = csv::WriterBuilder::new().from_writer(Vec::new());
    let mut head = vec!["id", "payload", "y"];
    if has_sub {
        head.push("y_sub");
    }
    head.push("h");
    if has_fold {
        head.push("fold");
    }
    if has_artificial {
        head.extend(["h_source", "h_bin_hat", "confidence"]);
    }
    head.extend(meta_keys.iter().map(|k| k.as_str()));
    writer.write_record(&head)?;

    for ex in examples {
        let payload = if ex.source.is_empty() {
            let line: Vec<String> = ex.payload.iter().map(|v| format!("{v}")).collect();
            bank.push_str(&line.join(","));
            bank.push('\n');
            bank_rows += 1;
            format!("{bank_name}#{}", bank_rows - 1)
        } else if same_root {
            ex.source.clone()
        } else {
            relocate(dataset.root(), &ex.source)
        };
        let mut rec = vec![ex.id.clone(), payload, ex.y.to_string()];
        if has_sub {
            rec.push(ex.y_sub.map(|s| (s + 1).to_string()).unwrap_or_default());
        }
        rec.push(ex.h.map(|h| h.to_string()).unwrap_or_default());
        if has_fold {
            rec.push(
                match ex.fold {
                    Some(Fold::Train) => "train",
                    Some(Fold::Test) => "test",
                    None => "",
                }
                .into(),
            );
        }
        if has_artificial {
            match ex.provenance {
                Some(Provenance::Artificial {
                    correct,
                    confidence,
                }) => rec.extend([
                    "artificial".to_string(),
                    u8::from(correct).to_string(),
                    format!("{confidence}"),
                ]),
                Some(Provenance::Real) => rec.extend(["real".into(), String::new(), String::new()]),
                None => rec.extend([String::new(), String::new(), String::new()]),
            }
        }
        for key in &meta_keys {
            rec.push(ex.meta.get(*key).cloned().unwrap_or_default());
        }
        writer.write_record(&rec)?;
    }
    let body = writer
        .into_inner()
        .map_err(|e| Error::Integrity(format!("csv flush: {e}")))?;
    out.push_str(&String::from_utf8_lossy(&body));

    if bank_rows > 0 {
        let bank_path = dir.join(&bank_name);
        fs::write(&bank_path, bank).map_err(|e| Error::io(&bank_path, e))?;
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn same_dir(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(a), Ok(b)) => a == b,
        _ => a == b,
    }
}

fn relocate(root: &Path, source: &str) -> String {
    let (file, row) = match source.rsplit_once('#') {
        Some((f, r)) => (f, Some(r)),
        None => (source, None),
    };
    let joined = root.join(file);
    let absolute = joined.canonicalize().unwrap_or(joined);
    match row {
        Some(r) => format!("{}#{r}", absolute.display()),
        None => absolute.display().to_string(),
    }
}
