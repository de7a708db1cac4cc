//! Iterative tensor types: a tensor view that also fixes the order in which
//! its tiles are streamed.
//!
//! An [`ITensorType`] partitions a tensor into identical element tiles and
//! walks them with a nested loop (the iteration space). Each data dimension
//! is driven by exactly one loop level; loop levels that drive no data
//! dimension re-stream everything nested inside them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Scalar kind carried by a tensor.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", try_from = "KindRepr")]
pub struct ElementKind {
    pub name: String,
    pub byte_width: u32,
}

/// Accepts either `"f32"` or `{"name": "f32", "byteWidth": 4}`.
#[derive(Deserialize)]
#[serde(untagged)]
enum KindRepr {
    Name(String),
    #[serde(rename_all = "camelCase")]
    Full { name: String, byte_width: u32 },
}

impl TryFrom<KindRepr> for ElementKind {
    type Error = String;

    fn try_from(repr: KindRepr) -> Result<Self, String> {
        match repr {
            KindRepr::Name(name) => {
                ElementKind::named(&name).ok_or_else(|| format!("unknown element kind `{name}`"))
            }
            KindRepr::Full { name, byte_width } => Ok(ElementKind::new(name, byte_width)),
        }
    }
}

const KNOWN_KINDS: &[(&str, u32)] = &[
    ("f64", 8),
    ("f32", 4),
    ("f16", 2),
    ("bf16", 2),
    ("i64", 8),
    ("i32", 4),
    ("i16", 2),
    ("i8", 1),
    ("u8", 1),
];

impl ElementKind {
    pub fn new(name: impl Into<String>, byte_width: u32) -> Self {
        Self {
            name: name.into(),
            byte_width,
        }
    }

    pub fn f32() -> Self {
        Self::new("f32", 4)
    }

    pub fn u8() -> Self {
        Self::new("u8", 1)
    }

    /// Looks up one of the standard scalar names.
    pub fn named(name: &str) -> Option<Self> {
        KNOWN_KINDS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, w)| Self::new(*n, *w))
    }

    pub fn bits(&self) -> u64 {
        self.byte_width as u64 * 8
    }

    fn is_standard(&self) -> bool {
        KNOWN_KINDS
            .iter()
            .any(|(n, w)| *n == self.name && *w == self.byte_width)
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_standard() {
            write!(f, "{}", self.name)
        } else {
            write!(f, "{}:{}", self.name, self.byte_width)
        }
    }
}

/// First violated invariant of an [`ITensorType`].
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeViolation {
    #[error("element kind `{0}` has zero byte width")]
    ZeroByteWidth(String),
    #[error("rank mismatch: data shape {data}, element shape {element}, dim source {dim_source}")]
    RankMismatch {
        data: usize,
        element: usize,
        dim_source: usize,
    },
    #[error("iteration space has {tripcounts} tripcounts but {steps} steps")]
    IterLengthMismatch { tripcounts: usize, steps: usize },
    #[error("{what} has a zero entry at index {index}")]
    ZeroExtent { what: &'static str, index: usize },
    #[error("data dim {data_dim} is driven by iteration dim {iter_dim}, which does not exist")]
    DimSourceOutOfRange { data_dim: usize, iter_dim: usize },
    #[error("iteration dim {iter_dim} drives more than one data dim")]
    NotInjective { iter_dim: usize },
    #[error("element extent {element} does not divide data extent {data} in dim {data_dim}")]
    NotDivisible {
        data_dim: usize,
        element: usize,
        data: usize,
    },
    #[error("iteration dim {iter_dim} steps by {step} but data dim {data_dim} has element extent {element}")]
    StepMismatch {
        data_dim: usize,
        iter_dim: usize,
        step: usize,
        element: usize,
    },
    #[error("iteration dim {iter_dim} covers {covered} elements of data dim {data_dim} (extent {data})")]
    ExtentMismatch {
        data_dim: usize,
        iter_dim: usize,
        covered: usize,
        data: usize,
    },
}

/// Stream-layout type of a FIFO interface.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ITensorType {
    pub data_shape: Vec<usize>,
    pub element_shape: Vec<usize>,
    pub iter_tripcounts: Vec<usize>,
    pub iter_steps: Vec<usize>,
    pub dim_source: Vec<usize>,
    pub element_kind: ElementKind,
}

impl ITensorType {
    /// Builds and validates a type.
    pub fn new(
        data_shape: Vec<usize>,
        element_shape: Vec<usize>,
        iter_tripcounts: Vec<usize>,
        iter_steps: Vec<usize>,
        dim_source: Vec<usize>,
        element_kind: ElementKind,
    ) -> Result<Self, TypeViolation> {
        let t = Self {
            data_shape,
            element_shape,
            iter_tripcounts,
            iter_steps,
            dim_source,
            element_kind,
        };
        t.validate()?;
        Ok(t)
    }

    /// Whole tensor pushed as a single token.
    pub fn whole(data_shape: Vec<usize>, element_kind: ElementKind) -> Self {
        let rank = data_shape.len();
        Self {
            element_shape: data_shape.clone(),
            iter_tripcounts: vec![1; rank],
            iter_steps: data_shape.clone(),
            dim_source: (0..rank).collect(),
            data_shape,
            element_kind,
        }
    }

    /// Row-major tiling: data dim `d` driven by loop level `d`.
    pub fn row_major(
        data_shape: Vec<usize>,
        element_shape: Vec<usize>,
        element_kind: ElementKind,
    ) -> Result<Self, TypeViolation> {
        let trips = data_shape
            .iter()
            .zip(&element_shape)
            .map(|(d, e)| if *e == 0 { 0 } else { d / e })
            .collect();
        let rank = data_shape.len();
        Self::new(
            data_shape,
            element_shape.clone(),
            trips,
            element_shape,
            (0..rank).collect(),
            element_kind,
        )
    }

    pub fn validate(&self) -> Result<(), TypeViolation> {
        if self.element_kind.byte_width == 0 {
            return Err(TypeViolation::ZeroByteWidth(self.element_kind.name.clone()));
        }
        let rank = self.data_shape.len();
        if self.element_shape.len() != rank || self.dim_source.len() != rank {
            return Err(TypeViolation::RankMismatch {
                data: rank,
                element: self.element_shape.len(),
                dim_source: self.dim_source.len(),
            });
        }
        if self.iter_tripcounts.len() != self.iter_steps.len() {
            return Err(TypeViolation::IterLengthMismatch {
                tripcounts: self.iter_tripcounts.len(),
                steps: self.iter_steps.len(),
            });
        }
        for (what, list) in [
            ("data shape", &self.data_shape),
            ("element shape", &self.element_shape),
            ("iteration tripcounts", &self.iter_tripcounts),
        ] {
            if let Some(index) = list.iter().position(|x| *x == 0) {
                return Err(TypeViolation::ZeroExtent { what, index });
            }
        }
        let levels = self.iter_tripcounts.len();
        let mut seen = vec![false; levels];
        for (data_dim, &iter_dim) in self.dim_source.iter().enumerate() {
            if iter_dim >= levels {
                return Err(TypeViolation::DimSourceOutOfRange { data_dim, iter_dim });
            }
            if seen[iter_dim] {
                return Err(TypeViolation::NotInjective { iter_dim });
            }
            seen[iter_dim] = true;
        }
        for d in 0..rank {
            let (data, element) = (self.data_shape[d], self.element_shape[d]);
            if data % element != 0 {
                return Err(TypeViolation::NotDivisible {
                    data_dim: d,
                    element,
                    data,
                });
            }
        }
        for d in 0..rank {
            let level = self.dim_source[d];
            let step = self.iter_steps[level];
            if step != self.element_shape[d] {
                return Err(TypeViolation::StepMismatch {
                    data_dim: d,
                    iter_dim: level,
                    step,
                    element: self.element_shape[d],
                });
            }
            let covered = self.iter_tripcounts[level] * step;
            if covered != self.data_shape[d] {
                return Err(TypeViolation::ExtentMismatch {
                    data_dim: d,
                    iter_dim: level,
                    covered,
                    data: self.data_shape[d],
                });
            }
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }

    pub fn rank(&self) -> usize {
        self.data_shape.len()
    }

    pub fn depth(&self) -> usize {
        self.iter_tripcounts.len()
    }

    /// Number of tokens pushed through the stream.
    pub fn token_count(&self) -> u64 {
        self.iter_tripcounts.iter().map(|&t| t as u64).product()
    }

    pub fn element_count(&self) -> u64 {
        self.element_shape.iter().map(|&e| e as u64).product()
    }

    pub fn num_elements(&self) -> u64 {
        self.data_shape.iter().map(|&e| e as u64).product()
    }

    pub fn token_bytes(&self) -> u64 {
        self.element_count() * self.element_kind.byte_width as u64
    }

    pub fn tensor_bytes(&self) -> u64 {
        self.num_elements() * self.element_kind.byte_width as u64
    }

    /// Data dimension driven by iteration level `level`, if any.
    pub fn driven_dim(&self, level: usize) -> Option<usize> {
        self.dim_source.iter().position(|&l| l == level)
    }

    pub fn is_reiteration(&self, level: usize) -> bool {
        self.driven_dim(level).is_none()
    }

    /// Data offsets addressed by one point of the iteration space, given
    /// per-level loop counters.
    pub fn offset_of(&self, counters: &[usize]) -> Vec<usize> {
        self.dim_source
            .iter()
            .map(|&level| counters[level] * self.iter_steps[level])
            .collect()
    }

    /// Iterates the stream in order, yielding loop counters with the data
    /// offset of each token.
    pub fn accesses(&self) -> Accesses<'_> {
        Accesses {
            ty: self,
            counters: vec![0; self.depth()],
            done: false,
        }
    }

    /// Ordered per-token data offsets.
    pub fn access_sequence(&self) -> Vec<Vec<usize>> {
        self.accesses().map(|(_, offset)| offset).collect()
    }

    /// Exact structural equality: the two sides stream identically.
    pub fn matches(&self, other: &Self) -> bool {
        self == other
    }

    /// Both views cover the same underlying tensor.
    pub fn compatible_data(&self, other: &Self) -> bool {
        self.data_shape == other.data_shape && self.element_kind == other.element_kind
    }
}

/// Lexicographic walk over an iteration space, outermost level slowest.
pub struct Accesses<'a> {
    ty: &'a ITensorType,
    counters: Vec<usize>,
    done: bool,
}

impl Iterator for Accesses<'_> {
    type Item = (Vec<usize>, Vec<usize>);

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = (self.counters.clone(), self.ty.offset_of(&self.counters));
        let mut level = self.counters.len();
        loop {
            if level == 0 {
                self.done = true;
                break;
            }
            level -= 1;
            self.counters[level] += 1;
            if self.counters[level] < self.ty.iter_tripcounts[level] {
                break;
            }
            self.counters[level] = 0;
        }
        Some(item)
    }
}

fn join<T: fmt::Display>(items: &[T], sep: &str) -> String {
    items
        .iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(sep)
}

impl fmt::Display for ITensorType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let domain = (0..self.depth())
            .map(|i| format!("d{i}"))
            .collect::<Vec<_>>()
            .join(",");
        let range = self
            .dim_source
            .iter()
            .map(|l| format!("d{l}"))
            .collect::<Vec<_>>()
            .join(",");
        write!(
            f,
            "itensor<{}x{}, space [{}]*[{}], map ({})->({})>",
            join(&self.element_shape, "x"),
            self.element_kind,
            join(&self.iter_tripcounts, ","),
            join(&self.iter_steps, ","),
            domain,
            range
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseTypeError {
    #[error("malformed itensor at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error(transparent)]
    Invalid(#[from] TypeViolation),
}

struct Cursor<'a> {
    src: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, ParseTypeError> {
        Err(ParseTypeError::Syntax {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn skip_ws(&mut self) {
        while self.src[self.pos..].starts_with(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, lit: &str) -> Result<(), ParseTypeError> {
        self.skip_ws();
        if self.src[self.pos..].starts_with(lit) {
            self.pos += lit.len();
            Ok(())
        } else {
            self.err(format!("expected `{lit}`"))
        }
    }

    fn number(&mut self) -> Result<usize, ParseTypeError> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let len = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
        if len == 0 {
            return self.err("expected a number");
        }
        let n = rest[..len]
            .parse()
            .or_else(|_| self.err("number out of range"))?;
        self.pos += len;
        Ok(n)
    }

    fn list(&mut self, open: &str, close: &str) -> Result<Vec<usize>, ParseTypeError> {
        self.eat(open)?;
        let mut out = Vec::new();
        self.skip_ws();
        if self.src[self.pos..].starts_with(close) {
            self.pos += close.len();
            return Ok(out);
        }
        loop {
            out.push(self.number()?);
            self.skip_ws();
            if self.src[self.pos..].starts_with(',') {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.eat(close)?;
        Ok(out)
    }

    fn dim_list(&mut self) -> Result<Vec<usize>, ParseTypeError> {
        self.eat("(")?;
        let mut out = Vec::new();
        self.skip_ws();
        if self.src[self.pos..].starts_with(')') {
            self.pos += 1;
            return Ok(out);
        }
        loop {
            self.eat("d")?;
            out.push(self.number()?);
            self.skip_ws();
            if self.src[self.pos..].starts_with(',') {
                self.pos += 1;
            } else {
                break;
            }
        }
        self.eat(")")?;
        Ok(out)
    }
}

impl FromStr for ITensorType {
    type Err = ParseTypeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut c = Cursor { src: s, pos: 0 };
        c.eat("itensor<")?;
        c.skip_ws();
        let head_end = match c.src[c.pos..].find(',') {
            Some(i) => c.pos + i,
            None => return c.err("expected `,` after element type"),
        };
        let head = c.src[c.pos..head_end].trim();
        let parts: Vec<&str> = head.split('x').collect();
        if parts.len() < 2 {
            return c.err("element type needs at least one extent and a kind");
        }
        let (dims, kind) = parts.split_at(parts.len() - 1);
        let mut element_shape = Vec::with_capacity(dims.len());
        for d in dims {
            match d.parse() {
                Ok(v) => element_shape.push(v),
                Err(_) => return c.err(format!("bad element extent `{d}`")),
            }
        }
        let kind = kind[0];
        let element_kind = match kind.split_once(':') {
            Some((name, w)) => match w.parse() {
                Ok(w) => ElementKind::new(name, w),
                Err(_) => return c.err(format!("bad byte width in `{kind}`")),
            },
            None => match ElementKind::named(kind) {
                Some(k) => k,
                None => return c.err(format!("unknown element kind `{kind}`")),
            },
        };
        c.pos = head_end;
        c.eat(",")?;
        c.eat("space")?;
        let iter_tripcounts = c.list("[", "]")?;
        c.eat("*")?;
        let iter_steps = c.list("[", "]")?;
        c.eat(",")?;
        c.eat("map")?;
        let domain = c.dim_list()?;
        if domain != (0..domain.len()).collect::<Vec<_>>() {
            return c.err("map domain must be (d0,d1,...)");
        }
        if domain.len() != iter_tripcounts.len() {
            return c.err("map domain rank differs from iteration space");
        }
        c.eat("->")?;
        let dim_source = c.dim_list()?;
        c.eat(">")?;
        c.skip_ws();
        if c.pos != s.len() {
            return c.err("trailing input");
        }
        if dim_source.len() != element_shape.len() {
            return Err(TypeViolation::RankMismatch {
                data: element_shape.len(),
                element: element_shape.len(),
                dim_source: dim_source.len(),
            }
            .into());
        }
        let mut data_shape = Vec::with_capacity(dim_source.len());
        for (d, &level) in dim_source.iter().enumerate() {
            if level >= iter_tripcounts.len() {
                return Err(TypeViolation::DimSourceOutOfRange {
                    data_dim: d,
                    iter_dim: level,
                }
                .into());
            }
            data_shape.push(iter_tripcounts[level] * iter_steps[level]);
        }
        Ok(ITensorType::new(
            data_shape,
            element_shape,
            iter_tripcounts,
            iter_steps,
            dim_source,
            element_kind,
        )?)
    }
}
