//! Plain-text file formats.
//!
//! Every file starts with a `format=1` line. Key/value documents hold one
//! `key=value` per line with `#` comments; arrays are comma-separated.
//! Numbers are written in the shortest form that parses back to the same
//! `f64`.
//!
//! Measure document:
//!
//! ```text
//! format=1
//! k=2
//! dim=1
//! component.0.beta0=0
//! component.0.beta1=2
//! component.0.a=-1
//! component.0.b=1
//! component.0.sigma=0.3
//! ...
//! ```
//!
//! Solution file: `m`, `d`, then `p1`..`p5`, each an array over groups
//! (`p1`, `p2` hold `m * d` values, group-major).
//!
//! Dataset CSV: header `x1,..,xd,y`, one observation per row.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{MoeError, Result};
use crate::model::{Dataset, ExpertComponent, Interval, MixingMeasure, ThetaBox};
use crate::polysys::{CandidateSolution, SolutionComponent};

pub const FORMAT_LINE: &str = "format=1";

fn parse_err(line: usize, message: impl Into<String>) -> MoeError {
    MoeError::Parse {
        line,
        message: message.into(),
    }
}

/// Parsed key/value document. Keys are consumed by the typed getters;
/// [`finish`](Self::finish) rejects whatever is left.
#[derive(Debug, Clone, Default)]
pub struct KeyValues {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    /// Parses a document that must open with `format=1`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = Self::default();
        let mut seen_format = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if !seen_format {
                if content.replace(' ', "") != FORMAT_LINE {
                    return Err(parse_err(line, format!("expected '{FORMAT_LINE}' as the first line")));
                }
                seen_format = true;
                continue;
            }
            kv.insert_line(content, line)?;
        }
        if !seen_format {
            return Err(parse_err(1, format!("empty document; expected '{FORMAT_LINE}'")));
        }
        Ok(kv)
    }

    /// Adds `key=value` pairs given outside a file, e.g. command-line
    /// overrides; later values replace earlier ones.
    pub fn set_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| MoeError::InvalidConfig(format!("override '{pair}' is not key=value")))?;
        self.entries.insert(k.trim().to_string(), (v.trim().to_string(), 0));
        Ok(())
    }

    fn insert_line(&mut self, content: &str, line: usize) -> Result<()> {
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| parse_err(line, format!("expected key=value, got '{content}'")))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            return Err(parse_err(line, "empty key"));
        }
        if let Some((_, first)) = self.entries.get(&key) {
            return Err(parse_err(line, format!("duplicate key '{key}' (first set on line {first})")));
        }
        self.entries.insert(key, (v.trim().to_string(), line));
        Ok(())
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn parse_value<T: std::str::FromStr>(key: &str, v: &str, line: usize) -> Result<T> {
        v.parse()
            .map_err(|_| parse_err(line, format!("key '{key}': cannot parse '{v}'")))
    }

    pub fn required<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let (v, line) = self
            .take(key)
            .ok_or_else(|| MoeError::InvalidConfig(format!("missing key '{key}'")))?;
        Self::parse_value(key, &v, line)
    }

    pub fn optional<T: std::str::FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        self.take(key)
            .map(|(v, line)| Self::parse_value(key, &v, line))
            .transpose()
    }

    pub fn optional_array(&mut self, key: &str) -> Result<Option<Vec<f64>>> {
        self.take(key)
            .map(|(v, line)| {
                v.split(',')
                    .map(|s| Self::parse_value::<f64>(key, s.trim(), line))
                    .collect()
            })
            .transpose()
    }

    pub fn required_array(&mut self, key: &str) -> Result<Vec<f64>> {
        self.optional_array(key)?
            .ok_or_else(|| MoeError::InvalidConfig(format!("missing key '{key}'")))
    }

    /// Fails on the first key nobody asked for, naming it.
    pub fn finish(self) -> Result<()> {
        match self.entries.into_iter().min_by_key(|(_, (_, line))| *line) {
            None => Ok(()),
            Some((key, (_, 0))) => Err(MoeError::InvalidConfig(format!("unknown key '{key}'"))),
            Some((key, (_, line))) => Err(parse_err(line, format!("unknown key '{key}'"))),
        }
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn write_measure(g: &MixingMeasure) -> String {
    let mut out = format!("{FORMAT_LINE}\nk={}\ndim={}\n", g.k(), g.dim());
    for (i, c) in g.components().iter().enumerate() {
        out.push_str(&format!(
            "component.{i}.beta0={}\ncomponent.{i}.beta1={}\ncomponent.{i}.a={}\ncomponent.{i}.b={}\ncomponent.{i}.sigma={}\n",
            c.beta0,
            join(&c.beta1),
            join(&c.a),
            c.b,
            c.sigma
        ));
    }
    out
}

pub fn parse_measure(text: &str) -> Result<MixingMeasure> {
    let mut kv = KeyValues::parse(text)?;
    let k: usize = kv.required("k")?;
    let dim: usize = kv.required("dim")?;
    if k == 0 || dim == 0 {
        return Err(MoeError::InvalidConfig("k and dim must be at least 1".into()));
    }
    let mut comps = Vec::with_capacity(k);
    for i in 0..k {
        let key = |f: &str| format!("component.{i}.{f}");
        let beta1 = kv.required_array(&key("beta1"))?;
        let a = kv.required_array(&key("a"))?;
        if beta1.len() != dim || a.len() != dim {
            return Err(MoeError::InvalidConfig(format!(
                "component {i}: beta1 and a need {dim} entries"
            )));
        }
        comps.push(ExpertComponent::new(
            kv.required(&key("beta0"))?,
            beta1,
            a,
            kv.required(&key("b"))?,
            kv.required(&key("sigma"))?,
        ));
    }
    kv.finish()?;
    MixingMeasure::new(comps)
}

pub fn read_measure(path: &Path) -> Result<MixingMeasure> {
    parse_measure(&fs::read_to_string(path)?)
}

pub fn write_solution(sol: &CandidateSolution) -> String {
    let col = |f: &dyn Fn(&SolutionComponent) -> Vec<f64>| {
        join(&sol.components.iter().flat_map(f).collect::<Vec<_>>())
    };
    format!(
        "{FORMAT_LINE}\nm={}\nd={}\np1={}\np2={}\np3={}\np4={}\np5={}\n",
        sol.m(),
        sol.dim,
        col(&|c| c.p1.clone()),
        col(&|c| c.p2.clone()),
        col(&|c| vec![c.p3]),
        col(&|c| vec![c.p4]),
        col(&|c| vec![c.p5]),
    )
}

pub fn parse_solution(text: &str) -> Result<CandidateSolution> {
    let mut kv = KeyValues::parse(text)?;
    let m: usize = kv.required("m")?;
    let d: usize = kv.required("d")?;
    let mut arr = |key: &str, len: usize| -> Result<Vec<f64>> {
        let v = kv.required_array(key)?;
        if v.len() != len {
            return Err(MoeError::InvalidConfig(format!(
                "key '{key}' needs {len} values (got {})",
                v.len()
            )));
        }
        Ok(v)
    };
    let (p1, p2) = (arr("p1", m * d)?, arr("p2", m * d)?);
    let (p3, p4, p5) = (arr("p3", m)?, arr("p4", m)?, arr("p5", m)?);
    kv.finish()?;
    let comps = (0..m)
        .map(|j| SolutionComponent {
            p1: p1[j * d..(j + 1) * d].to_vec(),
            p2: p2[j * d..(j + 1) * d].to_vec(),
            p3: p3[j],
            p4: p4[j],
            p5: p5[j],
        })
        .collect();
    CandidateSolution::new(d, comps)
}

pub fn write_dataset(data: &Dataset, w: impl std::io::Write) -> Result<()> {
    let mut w = w;
    writeln!(w, "{FORMAT_LINE}")?;
    let mut csv = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (1..=data.dim()).map(|u| format!("x{u}")).collect();
    header.push("y".into());
    csv.write_record(&header)?;
    for i in 0..data.n() {
        let mut row: Vec<String> = data.x(i).iter().map(f64::to_string).collect();
        row.push(data.y(i).to_string());
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.splitn(2, '\n');
    let first = lines.next().unwrap_or("").trim();
    if first != FORMAT_LINE {
        return Err(parse_err(1, format!("expected '{FORMAT_LINE}' as the first line")));
    }
    let body = lines.next().unwrap_or("");
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(body.as_bytes());
    let header = rdr.headers()?.clone();
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = (1..=d).map(|u| format!("x{u}")).chain(["y".to_string()]).collect();
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(parse_err(2, format!("expected header '{}'", expected.join(","))));
    }
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 3;
        let rec = rec.map_err(|e| parse_err(line, e.to_string()))?;
        if rec.len() != d + 1 {
            return Err(parse_err(line, format!("expected {} fields, got {}", d + 1, rec.len())));
        }
        for (u, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("cannot parse '{field}' as a number")))?;
            if u < d {
                x.push(v);
            } else {
                y.push(v);
            }
        }
    }
    Dataset::new(d, x, y)
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&fs::read_to_string(path)?)
}

fn interval(v: &[f64], key: &str) -> Result<Interval> {
    match v {
        [lo, hi] => Interval::new(*lo, *hi),
        _ => Err(MoeError::InvalidConfig(format!("key '{key}' needs two values lo,hi"))),
    }
}

/// Reads `theta.*` keys (`beta0, beta1, a, b, sigma, x`, each `lo,hi`; the
/// vector ones apply to every coordinate) over the default box.
pub fn take_theta(kv: &mut KeyValues, dim: usize) -> Result<ThetaBox> {
    let mut theta = ThetaBox::new(dim);
    if let Some(v) = kv.optional_array("theta.beta0")? {
        theta.beta0 = interval(&v, "theta.beta0")?;
    }
    if let Some(v) = kv.optional_array("theta.beta1")? {
        theta.beta1 = vec![interval(&v, "theta.beta1")?; dim];
    }
    if let Some(v) = kv.optional_array("theta.a")? {
        theta.a = vec![interval(&v, "theta.a")?; dim];
    }
    if let Some(v) = kv.optional_array("theta.b")? {
        theta.b = interval(&v, "theta.b")?;
    }
    if let Some(v) = kv.optional_array("theta.sigma")? {
        theta.sigma = interval(&v, "theta.sigma")?;
    }
    if let Some(v) = kv.optional_array("theta.x")? {
        theta.covariates = vec![interval(&v, "theta.x")?; dim];
    }
    theta.validate()?;
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polysys::order_three_solution;
    use proptest::prelude::*;

    #[test]
    fn key_value_diagnostics_name_line_and_key() {
        let err = KeyValues::parse("k=2\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        let err = KeyValues::parse("format=1\nk=2\nk=3\n").unwrap_err();
        assert!(err.to_string().contains("line 3") && err.to_string().contains("'k'"), "{err}");
        let err = KeyValues::parse("format=1\nnot a pair\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let mut kv = KeyValues::parse("format=1\n# comment\nk=2\nbogus=1\n").unwrap();
        let _: usize = kv.required("k").unwrap();
        let err = kv.finish().unwrap_err();
        assert!(err.to_string().contains("line 4") && err.to_string().contains("bogus"), "{err}");
        let mut kv = KeyValues::parse("format=1\nk=two\n").unwrap();
        let err = kv.required::<usize>("k").unwrap_err();
        assert!(err.to_string().contains("line 2") && err.to_string().contains("'k'"), "{err}");
    }

    #[test]
    fn overrides_replace_file_values() {
        let mut kv = KeyValues::parse("format=1\nk=2\n").unwrap();
        kv.set_override("k=5").unwrap();
        assert_eq!(kv.required::<usize>("k").unwrap(), 5);
        assert!(kv.set_override("nonsense").is_err());
    }

    #[test]
    fn measure_missing_key_is_named() {
        let text = "format=1\nk=1\ndim=1\ncomponent.0.beta0=0\ncomponent.0.beta1=1\ncomponent.0.a=1\ncomponent.0.b=0\n";
        let err = parse_measure(text).unwrap_err();
        assert!(err.to_string().contains("component.0.sigma"), "{err}");
    }

    #[test]
    fn solution_round_trip() {
        let sol = order_three_solution(2);
        assert_eq!(parse_solution(&write_solution(&sol)).unwrap(), sol);
    }

    #[test]
    fn dataset_round_trip_and_errors() {
        let data = Dataset::new(2, vec![0.1, -0.2, 0.3, 0.4], vec![1.5, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_dataset(&data, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("format=1\nx1,x2,y\n"));
        assert_eq!(parse_dataset(&text).unwrap(), data);
        let err = parse_dataset("format=1\nx1,y\n0.1,abc\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        assert!(parse_dataset("format=1\na,b\n1,2\n").is_err());
    }

    #[test]
    fn theta_keys() {
        let mut kv = KeyValues::parse("format=1\ntheta.sigma=0.1,4\ntheta.x=-2,2\n").unwrap();
        let theta = take_theta(&mut kv, 2).unwrap();
        assert_eq!(theta.sigma, Interval { lo: 0.1, hi: 4.0 });
        assert_eq!(theta.covariates.len(), 2);
        kv.finish().unwrap();
        let mut kv = KeyValues::parse("format=1\ntheta.b=1\n").unwrap();
        assert!(take_theta(&mut kv, 1).is_err());
    }

    fn finite() -> impl Strategy<Value = f64> {
        prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO
    }

    proptest! {
        #[test]
        fn measure_round_trip_is_lossless(
            raw in prop::collection::vec((finite(), finite(), finite(), finite(), finite(), finite(), 1e-300f64..1e300), 1..4)
        ) {
            let comps: Vec<ExpertComponent> = raw
                .iter()
                .map(|&(b0, b1x, b1y, a0, a1, b, s)| ExpertComponent::new(b0, vec![b1x, b1y], vec![a0, a1], b, s))
                .collect();
            let g = MixingMeasure::new(comps).unwrap();
            let back = parse_measure(&write_measure(&g)).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
