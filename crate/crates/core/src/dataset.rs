//! Examples, CSV interchange, out-of-time splitting, standardization and
//! mini-batching.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor2D};
use crate::sim::Population;
use crate::task::{Labels, Target};

/// One credit application as the lender sees it.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: u64,
    pub timestamp: u32,
    pub features: Vec<f64>,
    /// `None` where the outcome is unobserved.
    pub labels: Labels<Option<bool>>,
}

impl Example {
    pub fn label(&self, target: Target) -> Option<bool> {
        self.labels[target.index()]
    }
}

/// Full outcome record of one applicant, from the simulator sidecar.
#[derive(Clone, Debug, PartialEq)]
pub struct Counterfactual {
    pub id: u64,
    pub quality: f64,
    pub draw_day: Option<u32>,
    pub first_default_term: Option<u32>,
    pub labels: Labels<bool>,
}

pub type CounterfactualTable = BTreeMap<u64, Counterfactual>;

impl From<&Population> for CounterfactualTable {
    fn from(pop: &Population) -> Self {
        pop.records
            .iter()
            .map(|r| {
                (
                    r.id,
                    Counterfactual {
                        id: r.id,
                        quality: r.quality,
                        draw_day: r.draw_day,
                        first_default_term: r.first_default_term,
                        labels: r.labels,
                    },
                )
            })
            .collect()
    }
}

fn feature_dim(examples: &[Example]) -> Result<usize> {
    let dim = examples.first().map_or(0, |e| e.features.len());
    if let Some(e) = examples.iter().find(|e| e.features.len() != dim) {
        return Err(Error::Contract(format!(
            "example {} has {} features, expected {dim}",
            e.id,
            e.features.len()
        )));
    }
    Ok(dim)
}

fn header(dim: usize) -> Vec<String> {
    let mut cols = vec!["id".to_owned(), "timestamp".to_owned()];
    cols.extend((0..dim).map(|j| format!("f{j}")));
    cols.extend(Target::ALL.iter().map(|t| t.column()));
    cols
}

fn flag(b: bool) -> &'static str {
    if b {
        "1"
    } else {
        "0"
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        csv::ErrorKind::UnequalLengths { len, expected_len, .. } => {
            Error::parse(line, format!("{len} fields, header has {expected_len}"))
        }
        other => Error::parse(line, format!("{other:?}")),
    }
}

fn record_line(r: &csv::StringRecord) -> usize {
    r.position().map_or(0, |p| p.line() as usize)
}

fn reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new().has_headers(true).from_reader(input)
}

pub fn write_csv<W: Write>(examples: &[Example], out: W) -> Result<()> {
    let dim = feature_dim(examples)?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header(dim)).map_err(csv_error)?;
    let mut row = Vec::with_capacity(2 + dim + Target::ALL.len());
    for e in examples {
        row.clear();
        row.push(e.id.to_string());
        row.push(e.timestamp.to_string());
        row.extend(e.features.iter().map(f64::to_string));
        row.extend(e.labels.iter().map(|l| l.map_or("", flag).to_owned()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(examples: &[Example], path: impl AsRef<Path>) -> Result<()> {
    write_csv(examples, File::create(path)?)
}

fn parse_label(field: &str, line: usize, column: &str) -> Result<Option<bool>> {
    match field {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(Error::parse(
            line,
            format!("{column}: expected 0, 1 or empty, got `{other}`"),
        )),
    }
}

fn parse_num<N: std::str::FromStr>(field: &str, line: usize, column: &str) -> Result<N> {
    field
        .parse()
        .map_err(|_| Error::parse(line, format!("{column}: not a number: `{field}`")))
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<Example>> {
    let mut rdr = reader(input);
    let cols = rdr.headers().map_err(csv_error)?.clone();
    let n_labels = Target::ALL.len();
    if cols.len() < 2 + n_labels {
        return Err(Error::parse(1, "header is missing columns"));
    }
    let dim = cols.len() - 2 - n_labels;
    let expected = header(dim);
    for (got, want) in cols.iter().zip(&expected) {
        if got != want {
            return Err(Error::parse(
                1,
                format!("missing column `{want}` (found `{got}`)"),
            ));
        }
    }

    let mut out = Vec::new();
    for record in rdr.records() {
        let fields = record.map_err(csv_error)?;
        let line = record_line(&fields);
        let id = parse_num(&fields[0], line, "id")?;
        let timestamp = parse_num(&fields[1], line, "timestamp")?;
        let features = (0..dim)
            .map(|j| {
                let x: f64 = parse_num(&fields[2 + j], line, &expected[2 + j])?;
                if x.is_finite() {
                    Ok(x)
                } else {
                    Err(Error::parse(line, format!("f{j}: non-finite value")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut labels = [None; 6];
        for (k, t) in Target::ALL.iter().enumerate() {
            labels[k] = parse_label(&fields[2 + dim + k], line, &t.column())?;
        }
        if labels[Target::Credit.index()].is_none() {
            return Err(Error::parse(line, "label_credit must be observed"));
        }
        out.push(Example {
            id,
            timestamp,
            features,
            labels,
        });
    }
    Ok(out)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Vec<Example>> {
    read_csv(BufReader::new(File::open(path)?))
}

const CF_HEADER: [&str; 10] = [
    "id",
    "z",
    "D",
    "T",
    "label_credit",
    "label_draw_30",
    "label_draw_90",
    "label_mob1",
    "label_mob3",
    "label_mob6",
];

pub fn write_counterfactuals<W: Write>(table: &CounterfactualTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CF_HEADER).map_err(csv_error)?;
    let opt = |v: Option<u32>| v.map(|d| d.to_string()).unwrap_or_default();
    for c in table.values() {
        let mut row = vec![
            c.id.to_string(),
            c.quality.to_string(),
            opt(c.draw_day),
            opt(c.first_default_term),
        ];
        row.extend(c.labels.iter().map(|&l| flag(l).to_owned()));
        w.write_record(&row).map_err(csv_error)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_counterfactuals(table: &CounterfactualTable, path: impl AsRef<Path>) -> Result<()> {
    write_counterfactuals(table, File::create(path)?)
}

pub fn read_counterfactuals<R: Read>(input: R) -> Result<CounterfactualTable> {
    let mut rdr = reader(input);
    if rdr.headers().map_err(csv_error)? != CF_HEADER.as_slice() {
        return Err(Error::parse(1, format!("expected header `{}`", CF_HEADER.join(","))));
    }
    let mut table = CounterfactualTable::new();
    for record in rdr.records() {
        let f = record.map_err(csv_error)?;
        let line = record_line(&f);
        let opt = |s: &str, col: &str| -> Result<Option<u32>> {
            if s.is_empty() {
                Ok(None)
            } else {
                parse_num(s, line, col).map(Some)
            }
        };
        let mut labels = [false; 6];
        for (k, t) in Target::ALL.iter().enumerate() {
            labels[k] = parse_label(&f[4 + k], line, &t.column())?
                .ok_or_else(|| Error::parse(line, format!("{} is empty", t.column())))?;
        }
        let c = Counterfactual {
            id: parse_num(&f[0], line, "id")?,
            quality: parse_num(&f[1], line, "z")?,
            draw_day: opt(&f[2], "D")?,
            first_default_term: opt(&f[3], "T")?,
            labels,
        };
        table.insert(c.id, c);
    }
    Ok(table)
}

pub fn load_counterfactuals(path: impl AsRef<Path>) -> Result<CounterfactualTable> {
    read_counterfactuals(BufReader::new(File::open(path)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

/// Out-of-time split: `test` is everything at or after `cutoff`; earlier
/// examples go 80/20 to train/validation by a seeded shuffle. Each part
/// keeps the input order.
pub fn split_oot(examples: &[Example], cutoff: u32, seed: u64) -> Result<Split> {
    let (past, test): (Vec<usize>, Vec<usize>) =
        (0..examples.len()).partition(|&i| examples[i].timestamp < cutoff);
    if test.is_empty() {
        return Err(Error::config("split.cutoff", "no examples at or after the cutoff"));
    }
    if past.is_empty() {
        return Err(Error::config("split.cutoff", "no examples before the cutoff"));
    }
    let mut order = past;
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (order.len() * 4 + 2) / 5;
    let (mut train, mut val) = (order[..n_train].to_vec(), order[n_train..].to_vec());
    train.sort_unstable();
    val.sort_unstable();
    let take = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect();
    Ok(Split {
        train: take(&train),
        validation: take(&val),
        test: take(&test),
    })
}

/// Per-feature affine scaling fitted on one set of examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn fit(examples: &[Example]) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::config("standardize", "cannot fit on an empty set"));
        }
        let dim = feature_dim(examples)?;
        let n = examples.len() as f64;
        let mut mean = vec![0.0; dim];
        for e in examples {
            for (m, x) in mean.iter_mut().zip(&e.features) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for e in examples {
            for ((v, x), m) in var.iter_mut().zip(&e.features).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / n).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn transform(&self, examples: &[Example]) -> Vec<Example> {
        examples
            .iter()
            .map(|e| Example {
                features: e
                    .features
                    .iter()
                    .zip(self.mean.iter().zip(&self.std))
                    .map(|(x, (m, s))| (x - m) / s)
                    .collect(),
                ..e.clone()
            })
            .collect()
    }

    /// Fits on `split.train` and applies to all three parts.
    pub fn fit_split(split: &Split) -> Result<(Self, Split)> {
        let s = Self::fit(&split.train)?;
        let out = Split {
            train: s.transform(&split.train),
            validation: s.transform(&split.validation),
            test: s.transform(&split.test),
        };
        Ok((s, out))
    }
}

/// Mini-batch with per-target labels and observability masks.
///
/// Unobserved label slots hold NaN; the masked loss terms assert they never
/// read one.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub ids: Vec<u64>,
    pub features: Tensor2D<T>,
    pub labels: Labels<Vec<T>>,
    pub masks: Labels<Vec<bool>>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_examples<'a>(examples: impl IntoIterator<Item = &'a Example>) -> Self {
        let examples: Vec<&Example> = examples.into_iter().collect();
        let dim = examples.first().map_or(0, |e| e.features.len());
        let mut data = Vec::with_capacity(examples.len() * dim);
        let mut labels: Labels<Vec<T>> = Default::default();
        let mut masks: Labels<Vec<bool>> = Default::default();
        for e in &examples {
            assert_eq!(e.features.len(), dim, "ragged feature vectors");
            data.extend(e.features.iter().map(|&x| T::of(x)));
            for k in 0..6 {
                let (y, m) = match e.labels[k] {
                    Some(true) => (T::one(), true),
                    Some(false) => (T::zero(), true),
                    None => (T::nan(), false),
                };
                labels[k].push(y);
                masks[k].push(m);
            }
        }
        Self {
            ids: examples.iter().map(|e| e.id).collect(),
            features: Tensor2D::from_vec(examples.len(), dim, data)
                .expect("row-major buffer matches shape"),
            labels,
            masks,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn labels(&self, t: Target) -> &[T] {
        &self.labels[t.index()]
    }

    pub fn mask(&self, t: Target) -> &[bool] {
        &self.masks[t.index()]
    }
}

/// Visiting order of `n` examples in `epoch`; a pure function of
/// `(seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Shuffled mini-batches covering every example exactly once.
pub fn batches<'a, T: Scalar>(
    examples: &'a [Example],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> impl Iterator<Item = Batch<T>> + 'a {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let order = epoch_order(examples.len(), seed, epoch);
    let n_batches = examples.len().div_ceil(batch_size);
    (0..n_batches).map(move |b| {
        let idx = &order[b * batch_size..((b + 1) * batch_size).min(order.len())];
        Batch::from_examples(idx.iter().map(|&i| &examples[i]))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(id: u64, ts: u32, features: Vec<f64>) -> Example {
        Example {
            id,
            timestamp: ts,
            features,
            labels: [Some(false), None, None, None, None, None],
        }
    }

    #[test]
    fn empty_label_field_is_absent() {
        let csv = "id,timestamp,f0,label_credit,label_draw_30,label_draw_90,label_mob1,label_mob3,label_mob6\n\
                   3,5,0.25,1,1,1,,0,1\n";
        let got = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(got[0].labels[3], None);
        assert_eq!(got[0].labels[4], Some(false));
        assert_eq!(got[0].features, vec![0.25]);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let head = "id,timestamp,f0,f1,label_credit,label_draw_30,label_draw_90,label_mob1,label_mob3,label_mob6\n";
        let short = format!("{head}1,0,0.5,1,,,,,\n");
        match read_csv(short.as_bytes()) {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        let nan = format!("{head}1,0,0.5,x,1,,,,,\n2,0,abc,1,1,,,,,\n");
        assert!(matches!(read_csv(nan.as_bytes()), Err(Error::Parse { line: 2, .. })));
        let no_credit = format!("{head}1,0,0.5,1,,,,,,\n");
        assert!(matches!(
            read_csv(no_credit.as_bytes()),
            Err(Error::Parse { line: 2, .. })
        ));
        let missing = "id,timestamp,f0,label_credit,label_draw_30,label_draw_90,label_mob1,label_mob3\n";
        assert!(matches!(read_csv(missing.as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn oot_split_sizes() {
        let examples: Vec<_> = (0..100).map(|i| ex(i, i as u32, vec![0.0])).collect();
        let s = split_oot(&examples, 80, 1).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (64, 16, 20));
        let mut ids: Vec<u64> = s
            .train
            .iter()
            .chain(&s.validation)
            .chain(&s.test)
            .map(|e| e.id)
            .collect();
        ids.sort_unstable();
        assert_eq!(ids, (0..100).collect::<Vec<_>>());
        assert_eq!(s, split_oot(&examples, 80, 1).unwrap());
    }

    #[test]
    fn oot_split_rejects_empty_sides() {
        let examples: Vec<_> = (0..10).map(|i| ex(i, 10 + i as u32, vec![0.0])).collect();
        assert!(matches!(split_oot(&examples, 1_000, 0), Err(Error::Config { .. })));
        assert!(matches!(split_oot(&examples, 10, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn standardizer_uses_train_statistics() {
        let train = vec![ex(0, 0, vec![1.0, 5.0]), ex(1, 0, vec![3.0, 5.0])];
        let s = Standardizer::fit(&train).unwrap();
        let t = s.transform(&train);
        assert_eq!(t[0].features, vec![-1.0, 0.0]);
        assert_eq!(t[1].features, vec![1.0, 0.0]);
        let test = s.transform(&[ex(2, 9, vec![10.0, 5.0])]);
        assert_eq!(test[0].features, vec![8.0, 0.0]);
    }

    #[test]
    fn batch_sizes_and_order() {
        let examples: Vec<_> = (0..10).map(|i| ex(i, 0, vec![i as f64])).collect();
        let sizes: Vec<usize> = batches::<f64>(&examples, 4, 3, 0).map(|b| b.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
        let ids = |epoch| -> Vec<u64> {
            batches::<f64>(&examples, 4, 3, epoch)
                .flat_map(|b| b.ids)
                .collect()
        };
        assert_eq!(ids(0), ids(0));
        assert_ne!(ids(0), ids(1));
        let mut seen = ids(1);
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn rejected_rows_are_masked_in_later_stages() {
        let b = Batch::<f64>::from_examples(&[ex(0, 0, vec![0.0])]);
        assert!(b.mask(Target::Credit)[0]);
        for t in &Target::ALL[1..] {
            assert!(!b.mask(*t)[0]);
            assert!(b.labels(*t)[0].is_nan());
        }
    }
}
