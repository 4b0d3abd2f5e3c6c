//! Line-oriented checkpoint serialization shared by the model and
//! well-formedness stores. Values are written as hexadecimal f64 bit
//! patterns so a save/load round trip is bit-identical.

use crate::model::Param;

pub(crate) fn push_param(out: &mut String, name: &str, p: &Param) {
    out.push_str("param ");
    out.push_str(name);
    for d in &p.shape {
        out.push(' ');
        out.push_str(&d.to_string());
    }
    out.push('\n');
    let mut first = true;
    for v in &p.data {
        if !first {
            out.push(' ');
        }
        out.push_str(&format!("{:016x}", v.to_bits()));
        first = false;
    }
    out.push('\n');
}

/// Sequential reader over the lines of a checkpoint body.
pub(crate) struct LineReader<'a> {
    lines: std::str::Lines<'a>,
    pub line_no: usize,
}

impl<'a> LineReader<'a> {
    pub fn new(body: &'a str) -> Self {
        LineReader {
            lines: body.lines(),
            line_no: 0,
        }
    }

    pub fn next_line(&mut self) -> Result<&'a str, String> {
        self.line_no += 1;
        self.lines
            .next()
            .ok_or_else(|| format!("unexpected end of file at line {}", self.line_no))
    }

    /// Reads a `param <name> <dims...>` header and its value line.
    pub fn read_param(&mut self, expected_name: &str) -> Result<Param, String> {
        let header = self.next_line()?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("param") {
            return Err(format!("line {}: expected a param block", self.line_no));
        }
        let name = parts.next().ok_or("param block missing a name")?;
        if name != expected_name {
            return Err(format!(
                "line {}: expected param {expected_name:?}, found {name:?}",
                self.line_no
            ));
        }
        let shape: Vec<usize> = parts
            .map(|d| d.parse().map_err(|_| format!("bad dimension {d:?}")))
            .collect::<Result<_, _>>()?;
        let expected_len: usize = shape.iter().product();
        let values_line = self.next_line()?;
        let data: Vec<f64> = values_line
            .split_whitespace()
            .map(|h| {
                u64::from_str_radix(h, 16)
                    .map(f64::from_bits)
                    .map_err(|_| format!("bad value {h:?}"))
            })
            .collect::<Result<_, _>>()?;
        if data.len() != expected_len {
            return Err(format!(
                "param {expected_name:?}: expected {expected_len} values, found {}",
                data.len()
            ));
        }
        Ok(Param { data, shape })
    }
}
