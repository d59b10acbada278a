//! Index of condition entries: one id per publication year in the indexed
//! range, followed by one id per retained keyword.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use crate::corpus::AnnotatedRecord;

/// Keyword pruning threshold used for full-corpus runs.
pub const DEFAULT_MIN_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("cannot build a condition vocabulary from zero records")]
    Empty,
    #[error("min_count must be at least 1")]
    MinCount,
    #[error("year {year} outside the indexed range {first}..={last}")]
    YearOutOfRange { year: i32, first: i32, last: i32 },
    #[error("maximum year {max} precedes the earliest observed year {min}")]
    YearBounds { min: i32, max: i32 },
    #[error("vocab file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConditionVocab {
    year_base: i32,
    year_count: usize,
    keywords: Vec<String>,
    keyword_ids: HashMap<String, u32>,
}

impl ConditionVocab {
    /// Keeps keywords whose document frequency reaches `min_count`, and
    /// indexes years from the earliest observed one through `max_year`
    /// (the latest observed year when `None`).
    pub fn build(
        records: &[AnnotatedRecord],
        min_count: usize,
        max_year: Option<i32>,
    ) -> Result<Self, ConditionError> {
        if min_count == 0 {
            return Err(ConditionError::MinCount);
        }
        let first = records.iter().map(|r| r.year).min().ok_or(ConditionError::Empty)?;
        let observed_last = records.iter().map(|r| r.year).max().unwrap_or(first);
        let last = max_year.unwrap_or(observed_last);
        if last < first {
            return Err(ConditionError::YearBounds {
                min: first,
                max: last,
            });
        }
        let mut df: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records {
            let unique: HashSet<&str> = r.keywords.iter().map(String::as_str).collect();
            for k in unique {
                *df.entry(k).or_default() += 1;
            }
        }
        let keywords = df
            .into_iter()
            .filter(|&(_, c)| c >= min_count)
            .map(|(k, _)| k.to_string())
            .collect();
        Ok(Self::from_parts(first, (last - first + 1) as usize, keywords))
    }

    fn from_parts(year_base: i32, year_count: usize, keywords: Vec<String>) -> Self {
        let keyword_ids = keywords
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), (year_count + i) as u32))
            .collect();
        Self {
            year_base,
            year_count,
            keywords,
            keyword_ids,
        }
    }

    pub fn year_base(&self) -> i32 {
        self.year_base
    }

    pub fn year_count(&self) -> usize {
        self.year_count
    }

    pub fn last_year(&self) -> i32 {
        self.year_base + self.year_count as i32 - 1
    }

    pub fn keyword_count(&self) -> usize {
        self.keywords.len()
    }

    /// Number of condition ids; ids form the range `0..total`.
    pub fn total(&self) -> usize {
        self.year_count + self.keywords.len()
    }

    pub fn keyword_id(&self, keyword: &str) -> Option<u32> {
        self.keyword_ids.get(keyword).copied()
    }

    pub fn year_id(&self, year: i32) -> Result<u32, ConditionError> {
        if year < self.year_base || year > self.last_year() {
            return Err(ConditionError::YearOutOfRange {
                year,
                first: self.year_base,
                last: self.last_year(),
            });
        }
        Ok((year - self.year_base) as u32)
    }

    /// Year id first, then the ids of known keywords in input order without
    /// repeats. Unknown keywords are dropped.
    pub fn lookup<S: AsRef<str>>(&self, year: i32, keywords: &[S]) -> Result<Vec<u32>, ConditionError> {
        let mut ids = vec![self.year_id(year)?];
        for k in keywords {
            if let Some(id) = self.keyword_id(k.as_ref()) {
                if !ids[1..].contains(&id) {
                    ids.push(id);
                }
            }
        }
        Ok(ids)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.year_count {
            writeln!(out, "year\t{}\t{i}", self.year_base + i as i32).unwrap();
        }
        for (i, k) in self.keywords.iter().enumerate() {
            writeln!(out, "keyword\t{k}\t{}", self.year_count + i).unwrap();
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, ConditionError> {
        let err = |line: usize, msg: String| ConditionError::Format { line, msg };
        let mut years = Vec::new();
        let mut keywords = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let fields: Vec<&str> = line.split('\t').collect();
            let [kind, key, id] = fields[..] else {
                return Err(err(i + 1, "expected entry_type<TAB>key<TAB>id".into()));
            };
            let id: usize = id.parse().map_err(|e| err(i + 1, format!("bad id: {e}")))?;
            if id != i {
                return Err(err(i + 1, format!("id {id} breaks the contiguous order")));
            }
            match kind {
                "year" if keywords.is_empty() => {
                    let y: i32 = key.parse().map_err(|e| err(i + 1, format!("bad year: {e}")))?;
                    if let Some(&prev) = years.last() {
                        if y != prev + 1 {
                            return Err(err(i + 1, format!("year {y} does not follow {prev}")));
                        }
                    }
                    years.push(y);
                }
                "keyword" => keywords.push(key.to_string()),
                _ => return Err(err(i + 1, format!("unexpected entry type {kind:?}"))),
            }
        }
        let Some(&base) = years.first() else {
            return Err(err(0, "no year entries".into()));
        };
        Ok(Self::from_parts(base, years.len(), keywords))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ConditionError> {
        std::fs::write(path, self.to_tsv())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConditionError> {
        Self::from_tsv(&std::fs::read_to_string(path)?)
    }
}
