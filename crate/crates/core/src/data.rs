//! Observation containers, sufficient statistics and CSV ingestion.
//!
//! Activity logs use a long format (`user_id,day`, one row per active day);
//! first-trigger logs use `user_id,first_day`. User ids are opaque labels.

use std::collections::HashMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which observation model a set of statistics feeds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Daily 0/1 activity.
    #[serde(alias = "bm")]
    Bernoulli,
    /// First trigger day only.
    #[default]
    #[serde(alias = "gm")]
    Geometric,
}

impl ModelKind {
    pub fn short_name(self) -> &'static str {
        match self {
            ModelKind::Bernoulli => "bm",
            ModelKind::Geometric => "gm",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bm" | "bernoulli" => Ok(ModelKind::Bernoulli),
            "gm" | "geometric" => Ok(ModelKind::Geometric),
            other => Err(Error::input(format!("unknown model `{other}` (expected bm or gm)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserActivity {
    pub id: String,
    /// Sorted, distinct active days in `1..=d`.
    pub days: Vec<u32>,
}

/// Daily activity of every user seen at least once in days `1..=d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityMatrix {
    d: u32,
    users: Vec<UserActivity>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trigger {
    pub id: String,
    pub first_day: u32,
}

/// First trigger day of every user seen in days `1..=d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriggerData {
    d: u32,
    triggers: Vec<Trigger>,
}

/// Per-user integer summaries: activity counts `M_i` (Bernoulli) or first
/// trigger days `Y_i` (Geometric), all in `1..=d`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficientStats {
    pub d: u32,
    pub kind: ModelKind,
    pub counts: Vec<u32>,
}

impl SufficientStats {
    pub fn new(d: u32, kind: ModelKind, counts: Vec<u32>) -> Result<Self> {
        if d == 0 {
            return Err(Error::input("number of observed days must be at least 1"));
        }
        if let Some(bad) = counts.iter().find(|&&c| c == 0 || c > d) {
            return Err(Error::input(format!("per-user statistic {bad} outside 1..={d}")));
        }
        Ok(Self { d, kind, counts })
    }

    /// `N_d`, the number of distinct users observed.
    pub fn n_users(&self) -> u64 {
        self.counts.len() as u64
    }

    /// `(value, multiplicity)` pairs; `value` ranges over `1..=d`.
    pub fn histogram(&self) -> Vec<(u32, u64)> {
        let mut hist = vec![0u64; self.d as usize + 1];
        for &c in &self.counts {
            hist[c as usize] += 1;
        }
        hist.into_iter()
            .enumerate()
            .filter(|&(_, m)| m > 0)
            .map(|(v, m)| (v as u32, m))
            .collect()
    }
}

impl ActivityMatrix {
    pub fn new(d: u32, users: Vec<UserActivity>) -> Result<Self> {
        if d == 0 {
            return Err(Error::input("number of observed days must be at least 1"));
        }
        let mut seen = HashMap::with_capacity(users.len());
        for u in &users {
            if u.days.is_empty() {
                return Err(Error::input(format!("user `{}` has no active day", u.id)));
            }
            if u.days.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::input(format!("active days of `{}` are not sorted and distinct", u.id)));
            }
            if u.days[0] == 0 || *u.days.last().expect("non-empty") > d {
                return Err(Error::input(format!("user `{}` active outside 1..={d}", u.id)));
            }
            if seen.insert(u.id.as_str(), ()).is_some() {
                return Err(Error::input(format!("duplicate user `{}`", u.id)));
            }
        }
        Ok(Self { d, users })
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn users(&self) -> &[UserActivity] {
        &self.users
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    /// Bernoulli statistics, `M_i = |active days|`.
    pub fn bernoulli_stats(&self) -> SufficientStats {
        SufficientStats {
            d: self.d,
            kind: ModelKind::Bernoulli,
            counts: self.users.iter().map(|u| u.days.len() as u32).collect(),
        }
    }

    /// Geometric statistics from each user's first active day.
    pub fn geometric_stats(&self) -> SufficientStats {
        SufficientStats {
            d: self.d,
            kind: ModelKind::Geometric,
            counts: self.users.iter().map(|u| u.days[0]).collect(),
        }
    }

    pub fn stats(&self, kind: ModelKind) -> SufficientStats {
        match kind {
            ModelKind::Bernoulli => self.bernoulli_stats(),
            ModelKind::Geometric => self.geometric_stats(),
        }
    }

    pub fn first_triggers(&self) -> TriggerData {
        TriggerData {
            d: self.d,
            triggers: self
                .users
                .iter()
                .map(|u| Trigger {
                    id: u.id.clone(),
                    first_day: u.days[0],
                })
                .collect(),
        }
    }

    /// The first `d` days of the log; users silent throughout are dropped.
    pub fn restrict(&self, d: u32) -> Result<ActivityMatrix> {
        if d == 0 || d > self.d {
            return Err(Error::input(format!("cannot restrict {} observed days to {d}", self.d)));
        }
        let users = self
            .users
            .iter()
            .filter_map(|u| {
                let days: Vec<u32> = u.days.iter().copied().take_while(|&x| x <= d).collect();
                (!days.is_empty()).then(|| UserActivity { id: u.id.clone(), days })
            })
            .collect();
        Ok(ActivityMatrix { d, users })
    }

    /// Users whose first active day falls in `(after, after + horizon]`.
    pub fn new_users_between(&self, after: u32, horizon: u32) -> u64 {
        self.users
            .iter()
            .filter(|u| u.days[0] > after && u.days[0] <= after + horizon)
            .count() as u64
    }
}

impl TriggerData {
    pub fn new(d: u32, triggers: Vec<Trigger>) -> Result<Self> {
        if d == 0 {
            return Err(Error::input("number of observed days must be at least 1"));
        }
        let mut seen = HashMap::with_capacity(triggers.len());
        for t in &triggers {
            if t.first_day == 0 || t.first_day > d {
                return Err(Error::input(format!(
                    "first day {} of `{}` outside 1..={d}",
                    t.first_day, t.id
                )));
            }
            if seen.insert(t.id.as_str(), ()).is_some() {
                return Err(Error::input(format!("duplicate user `{}`", t.id)));
            }
        }
        Ok(Self { d, triggers })
    }

    pub fn d(&self) -> u32 {
        self.d
    }

    pub fn triggers(&self) -> &[Trigger] {
        &self.triggers
    }

    pub fn n_users(&self) -> usize {
        self.triggers.len()
    }

    pub fn stats(&self) -> SufficientStats {
        SufficientStats {
            d: self.d,
            kind: ModelKind::Geometric,
            counts: self.triggers.iter().map(|t| t.first_day).collect(),
        }
    }

    pub fn restrict(&self, d: u32) -> Result<TriggerData> {
        if d == 0 || d > self.d {
            return Err(Error::input(format!("cannot restrict {} observed days to {d}", self.d)));
        }
        Ok(TriggerData {
            d,
            triggers: self.triggers.iter().filter(|t| t.first_day <= d).cloned().collect(),
        })
    }

    pub fn new_users_between(&self, after: u32, horizon: u32) -> u64 {
        self.triggers
            .iter()
            .filter(|t| t.first_day > after && t.first_day <= after + horizon)
            .count() as u64
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn csv_reader<R: Read>(reader: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

fn parse_error(source: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: source.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn check_header<R: Read>(rdr: &mut csv::Reader<R>, source: &Path, expected: [&str; 2]) -> Result<()> {
    let header = rdr.headers().map_err(|e| parse_error(source, 1, e.to_string()))?;
    let got: Vec<&str> = header.iter().map(|h| h.trim_start_matches('\u{feff}')).collect();
    if got != expected {
        return Err(parse_error(
            source,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

fn parse_day(field: &str, source: &Path, line: u64) -> Result<u32> {
    let day: u32 = field
        .parse()
        .map_err(|_| parse_error(source, line, format!("day `{field}` is not a non-negative integer")))?;
    if day == 0 {
        return Err(parse_error(source, line, "days are numbered from 1"));
    }
    Ok(day)
}

/// Parse a `user_id,day` activity log. `d` defaults to the largest day seen;
/// an empty log needs it explicitly.
pub fn read_activity_csv<R: Read>(reader: R, source: &Path, d: Option<u32>) -> Result<ActivityMatrix> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, source, ["user_id", "day"])?;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut users: Vec<UserActivity> = Vec::new();
    let mut max_day = 0u32;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(source, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_error(source, line, format!("expected 2 fields, found {}", rec.len())));
        }
        let id = &rec[0];
        if id.is_empty() {
            return Err(parse_error(source, line, "empty user_id"));
        }
        let day = parse_day(&rec[1], source, line)?;
        max_day = max_day.max(day);
        let slot = *index.entry(id.to_string()).or_insert_with(|| {
            users.push(UserActivity {
                id: id.to_string(),
                days: Vec::new(),
            });
            users.len() - 1
        });
        users[slot].days.push(day);
    }
    for u in &mut users {
        u.days.sort_unstable();
        u.days.dedup();
    }
    let d = match d {
        Some(d) if d < max_day => {
            return Err(Error::input(format!(
                "{}: observed day {max_day} exceeds the declared window of {d} days",
                source.display()
            )))
        }
        Some(d) => d,
        None if max_day == 0 => {
            return Err(Error::input(format!(
                "{}: no activity rows; the number of days must be given explicitly",
                source.display()
            )))
        }
        None => max_day,
    };
    ActivityMatrix::new(d, users)
}

pub fn ingest_activity_csv(path: &Path, d: Option<u32>) -> Result<ActivityMatrix> {
    read_activity_csv(open(path)?, path, d)
}

/// Sufficient statistics from either log format, told apart by the header.
/// Trigger logs only carry Geometric information.
pub fn ingest_stats(path: &Path, d: Option<u32>, kind: ModelKind) -> Result<SufficientStats> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let header = text.lines().next().unwrap_or("");
    if header.split(',').nth(1).map(|h| h.trim()) == Some("first_day") {
        if kind == ModelKind::Bernoulli {
            return Err(parse_error(
                path,
                1,
                "the Bernoulli model needs a `user_id,day` activity log, not first trigger days",
            ));
        }
        return Ok(read_trigger_csv(text.as_bytes(), path, d)?.stats());
    }
    Ok(read_activity_csv(text.as_bytes(), path, d)?.stats(kind))
}

/// Parse a `user_id,first_day` log; duplicate users are rejected.
pub fn read_trigger_csv<R: Read>(reader: R, source: &Path, d: Option<u32>) -> Result<TriggerData> {
    let mut rdr = csv_reader(reader);
    check_header(&mut rdr, source, ["user_id", "first_day"])?;
    let mut seen: HashMap<String, u64> = HashMap::new();
    let mut triggers = Vec::new();
    let mut max_day = 0u32;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(source, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_error(source, line, format!("expected 2 fields, found {}", rec.len())));
        }
        let id = rec[0].to_string();
        if id.is_empty() {
            return Err(parse_error(source, line, "empty user_id"));
        }
        let first_day = parse_day(&rec[1], source, line)?;
        if let Some(first_line) = seen.insert(id.clone(), line) {
            return Err(parse_error(
                source,
                line,
                format!("duplicate user `{id}` (first seen on line {first_line})"),
            ));
        }
        max_day = max_day.max(first_day);
        triggers.push(Trigger { id, first_day });
    }
    let d = match d {
        Some(d) if d < max_day => {
            return Err(Error::input(format!(
                "{}: first day {max_day} exceeds the declared window of {d} days",
                source.display()
            )))
        }
        Some(d) => d,
        None if max_day == 0 => {
            return Err(Error::input(format!(
                "{}: no trigger rows; the number of days must be given explicitly",
                source.display()
            )))
        }
        None => max_day,
    };
    TriggerData::new(d, triggers)
}

pub fn ingest_trigger_csv(path: &Path, d: Option<u32>) -> Result<TriggerData> {
    read_trigger_csv(open(path)?, path, d)
}

/// Rows sorted by user id, then day.
pub fn write_activity_csv<W: Write>(data: &ActivityMatrix, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["user_id", "day"])?;
    let mut users: Vec<&UserActivity> = data.users.iter().collect();
    users.sort_by(|a, b| a.id.cmp(&b.id));
    for u in users {
        for day in &u.days {
            wtr.write_record([u.id.as_str(), &day.to_string()])?;
        }
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<activity csv>".into(),
        source,
    })
}

pub fn write_trigger_csv<W: Write>(data: &TriggerData, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["user_id", "first_day"])?;
    let mut rows: Vec<&Trigger> = data.triggers.iter().collect();
    rows.sort_by(|a, b| a.id.cmp(&b.id));
    for t in rows {
        wtr.write_record([t.id.as_str(), &t.first_day.to_string()])?;
    }
    wtr.flush().map_err(|source| Error::Io {
        path: "<trigger csv>".into(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn src() -> &'static Path {
        Path::new("test.csv")
    }

    #[test]
    fn parses_activity_rows() {
        let text = "user_id,day\nu1,1\nu1,3\nu2,2\nu1,3\n";
        let m = read_activity_csv(text.as_bytes(), src(), None).unwrap();
        assert_eq!(m.d(), 3);
        assert_eq!(m.users()[0].days, vec![1, 3]);
        assert_eq!(m.users()[1].days, vec![2]);
        let bm = m.bernoulli_stats();
        assert_eq!(bm.counts, vec![2, 1]);
        assert_eq!(bm.n_users(), 2);
        assert_eq!(m.geometric_stats().counts, vec![1, 2]);
    }

    #[test]
    fn accepts_crlf() {
        let text = "user_id,day\r\nu1,1\r\nu2,4\r\n";
        let m = read_activity_csv(text.as_bytes(), src(), None).unwrap();
        assert_eq!(m.d(), 4);
        assert_eq!(m.n_users(), 2);
    }

    #[test]
    fn empty_activity_needs_explicit_days() {
        let text = "user_id,day\n";
        assert!(read_activity_csv(text.as_bytes(), src(), None).is_err());
        let m = read_activity_csv(text.as_bytes(), src(), Some(5)).unwrap();
        assert_eq!(m.n_users(), 0);
        let s = m.bernoulli_stats();
        assert_eq!((s.d, s.n_users()), (5, 0));
        assert!(s.counts.is_empty());
    }

    #[test]
    fn day_zero_reports_line() {
        let text = "user_id,day\nu1,1\nu2,0\n";
        match read_activity_csv(text.as_bytes(), src(), None) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_header_rejected() {
        let text = "user,day\nu1,1\n";
        assert!(matches!(
            read_activity_csv(text.as_bytes(), src(), None),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn window_override() {
        let text = "user_id,day\nu1,2\n";
        assert_eq!(read_activity_csv(text.as_bytes(), src(), Some(9)).unwrap().d(), 9);
        assert!(read_activity_csv(text.as_bytes(), src(), Some(1)).is_err());
    }

    #[test]
    fn ingest_detects_format() {
        let dir = tempfile::tempdir().unwrap();
        let act = dir.path().join("a.csv");
        let trig = dir.path().join("t.csv");
        std::fs::write(&act, "user_id,day\nu1,1\nu1,3\nu2,2\n").unwrap();
        std::fs::write(&trig, "user_id,first_day\nu1,1\nu2,2\n").unwrap();
        let gm = ingest_stats(&act, None, ModelKind::Geometric).unwrap();
        assert_eq!(gm, ingest_stats(&trig, Some(3), ModelKind::Geometric).unwrap());
        assert_eq!(ingest_stats(&act, None, ModelKind::Bernoulli).unwrap().counts, vec![2, 1]);
        assert!(ingest_stats(&trig, None, ModelKind::Bernoulli).is_err());
        let missing = dir.path().join("nope.csv");
        let err = ingest_stats(&missing, None, ModelKind::Geometric).unwrap_err();
        assert!(err.to_string().contains("nope.csv"));
    }

    #[test]
    fn trigger_rows() {
        let text = "user_id,first_day\nu1,2\nu2,7\n";
        let t = read_trigger_csv(text.as_bytes(), src(), Some(7)).unwrap();
        let s = t.stats();
        assert_eq!((s.n_users(), s.counts.clone()), (2, vec![2, 7]));
        assert_eq!(s.kind, ModelKind::Geometric);
    }

    #[test]
    fn trigger_duplicates_and_range() {
        let dup = "user_id,first_day\nu1,2\nu1,3\n";
        assert!(read_trigger_csv(dup.as_bytes(), src(), None).is_err());
        let late = "user_id,first_day\nu1,9\n";
        assert!(read_trigger_csv(late.as_bytes(), src(), Some(7)).is_err());
    }

    #[test]
    fn restriction_and_new_user_counts() {
        let text = "user_id,day\na,1\na,5\nb,4\nc,6\n";
        let m = read_activity_csv(text.as_bytes(), src(), None).unwrap();
        let train = m.restrict(3).unwrap();
        assert_eq!(train.n_users(), 1);
        assert_eq!(train.users()[0].days, vec![1]);
        assert_eq!(m.new_users_between(3, 3), 2);
        assert_eq!(m.new_users_between(3, 1), 1);
    }

    #[test]
    fn histogram_counts() {
        let s = SufficientStats::new(4, ModelKind::Bernoulli, vec![1, 3, 1, 4]).unwrap();
        assert_eq!(s.histogram(), vec![(1, 2), (3, 1), (4, 1)]);
        assert!(SufficientStats::new(4, ModelKind::Bernoulli, vec![5]).is_err());
    }

    fn arb_rows() -> impl Strategy<Value = Vec<(u8, u32)>> {
        prop::collection::vec((0u8..20, 1u32..30), 0..80)
    }

    proptest! {
        #[test]
        fn activity_round_trip(rows in arb_rows()) {
            let mut text = String::from("user_id,day\n");
            for (u, d) in &rows {
                text.push_str(&format!("user{u},{d}\n"));
            }
            let m = read_activity_csv(text.as_bytes(), src(), Some(30)).unwrap();
            let mut out = Vec::new();
            write_activity_csv(&m, &mut out).unwrap();
            let again = read_activity_csv(out.as_slice(), src(), Some(30)).unwrap();

            let mut expected: Vec<(String, u32)> = rows.iter().map(|(u, d)| (format!("user{u}"), *d)).collect();
            expected.sort();
            expected.dedup();
            let mut emitted: Vec<(String, u32)> = again
                .users()
                .iter()
                .flat_map(|u| u.days.iter().map(move |d| (u.id.clone(), *d)))
                .collect();
            emitted.sort();
            prop_assert_eq!(emitted, expected);
        }

        #[test]
        fn stats_ignore_user_order(rows in arb_rows(), rot in 0usize..20) {
            let mut text = String::from("user_id,day\n");
            for (u, d) in &rows {
                text.push_str(&format!("user{u},{d}\n"));
            }
            let m = read_activity_csv(text.as_bytes(), src(), Some(30)).unwrap();
            let mut users = m.users().to_vec();
            if !users.is_empty() {
                let k = rot % users.len();
                users.rotate_left(k);
            }
            let shuffled = ActivityMatrix::new(30, users).unwrap();
            let mut a = m.bernoulli_stats().counts;
            let mut b = shuffled.bernoulli_stats().counts;
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
        }
    }
}
