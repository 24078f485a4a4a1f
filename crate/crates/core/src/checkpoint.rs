//! Text checkpoints of named parameter tensors.
//!
//! ```text
//! esrf-checkpoint v1
//! tensor <name> <rows> <cols>
//! <row 0 values, space separated>
//! ...
//! neighborhoods <users>
//! <user> <neighbor>:<count> <neighbor>:<count> ...
//! end
//! ```
//!
//! Values are written in Rust's shortest round-trip form, so a save/load
//! cycle reproduces every `f64` exactly. The neighborhood block is optional.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::generator::AlternativeNeighborhood;

const MAGIC: &str = "esrf-checkpoint v1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Array2<f64>)>,
    pub neighborhoods: Option<Vec<AlternativeNeighborhood>>,
}

impl Checkpoint {
    pub fn push(&mut self, name: impl Into<String>, tensor: &Array2<f64>) {
        self.tensors.push((name.into(), tensor.clone()));
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Removes and returns a tensor, checking its shape.
    pub fn take(&mut self, name: &str, shape: (usize, usize)) -> Result<Array2<f64>> {
        let pos = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Input(format!("checkpoint has no tensor {name}")))?;
        let (_, t) = self.tensors.remove(pos);
        if t.dim() != shape {
            return Err(Error::Input(format!(
                "checkpoint tensor {name} is {:?}, expected {:?}",
                t.dim(),
                shape
            )));
        }
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{MAGIC}")?;
        for (name, t) in &self.tensors {
            if name.contains(char::is_whitespace) || name.is_empty() {
                return Err(Error::Input(format!("bad tensor name {name:?}")));
            }
            writeln!(w, "tensor {name} {} {}", t.nrows(), t.ncols())?;
            for row in t.rows() {
                let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(w, "{}", line.join(" "))?;
            }
        }
        if let Some(hoods) = &self.neighborhoods {
            writeln!(w, "neighborhoods {}", hoods.len())?;
            for (u, h) in hoods.iter().enumerate() {
                write!(w, "{u}")?;
                for &(v, c) in &h.neighbors {
                    write!(w, " {v}:{c}")?;
                }
                writeln!(w)?;
            }
        }
        writeln!(w, "end")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = BufReader::new(fs::File::open(path)?);
        let mut lines = reader.lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line + 1,
            message,
        };
        match lines.next() {
            Some((_, Ok(l))) if l.trim_end() == MAGIC => {}
            _ => return Err(parse_err(0, format!("expected header {MAGIC:?}"))),
        }
        let mut out = Checkpoint::default();
        loop {
            let Some((no, line)) = lines.next() else {
                return Err(parse_err(0, "missing end marker".into()));
            };
            let line = line?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["end"] => break,
                ["tensor", name, rows, cols] => {
                    let rows: usize = rows.parse().map_err(|_| parse_err(no, "bad row count".into()))?;
                    let cols: usize = cols.parse().map_err(|_| parse_err(no, "bad column count".into()))?;
                    let mut values = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (rno, row) = lines
                            .next()
                            .ok_or_else(|| parse_err(no, format!("truncated tensor {name}")))?;
                        let row = row?;
                        let before = values.len();
                        for tok in row.split_whitespace() {
                            values.push(
                                tok.parse::<f64>()
                                    .map_err(|_| parse_err(rno, format!("bad value {tok:?}")))?,
                            );
                        }
                        if values.len() - before != cols {
                            return Err(parse_err(rno, format!("expected {cols} values")));
                        }
                    }
                    let t = Array2::from_shape_vec((rows, cols), values).expect("counted");
                    out.tensors.push(((*name).to_owned(), t));
                }
                ["neighborhoods", count] => {
                    let count: usize = count.parse().map_err(|_| parse_err(no, "bad user count".into()))?;
                    let mut hoods = Vec::with_capacity(count);
                    for u in 0..count {
                        let (rno, row) = lines
                            .next()
                            .ok_or_else(|| parse_err(no, "truncated neighborhoods".into()))?;
                        let row = row?;
                        let mut toks = row.split_whitespace();
                        if toks.next() != Some(u.to_string().as_str()) {
                            return Err(parse_err(rno, format!("expected user {u}")));
                        }
                        let mut neighbors = Vec::new();
                        for tok in toks {
                            let (v, c) = tok
                                .split_once(':')
                                .and_then(|(v, c)| Some((v.parse().ok()?, c.parse().ok()?)))
                                .ok_or_else(|| parse_err(rno, format!("bad neighbor {tok:?}")))?;
                            neighbors.push((v, c));
                        }
                        hoods.push(AlternativeNeighborhood { neighbors });
                    }
                    out.neighborhoods = Some(hoods);
                }
                _ => return Err(parse_err(no, format!("unexpected line {line:?}"))),
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let mut c = Checkpoint::default();
        c.push("a", &array![[0.1, -1e-300], [f64::MAX, 1.0 / 3.0]]);
        c.push("b", &Array2::zeros((0, 3)));
        c.neighborhoods = Some(vec![
            AlternativeNeighborhood::from_users([2, 2, 1]),
            AlternativeNeighborhood::default(),
        ]);
        c.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn shape_and_header_checks() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        let mut c = Checkpoint::default();
        c.push("a", &array![[1.0, 2.0]]);
        c.save(&path).unwrap();
        let mut back = Checkpoint::load(&path).unwrap();
        assert!(back.clone().take("a", (2, 1)).is_err());
        assert!(back.take("a", (1, 2)).is_ok());
        fs::write(&path, "nope\n").unwrap();
        assert!(Checkpoint::load(&path).is_err());
        fs::write(&path, format!("{MAGIC}\ntensor a 1 2\n1.0\nend\n")).unwrap();
        assert!(matches!(Checkpoint::load(&path), Err(Error::Parse { line: 3, .. })));
    }
}
