//! Regular 2-D grids and the ASCII grid file format.
//!
//! Values are stored row-major with the northernmost row first. Cell
//! membership uses half-open intervals: a cell covers
//! `[x0, x0 + cellsize) × [y0, y0 + cellsize)` where `(x0, y0)` is its
//! south-west corner, so a point on a shared edge belongs to the cell to its
//! east (vertical edge) or north (horizontal edge).

use std::fmt::Write as _;
use std::path::Path;

use crate::{Error, Result};

/// Value written to the `NODATA_value` header line. Grids never contain it.
pub const NODATA: f64 = -9999.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RasterGrid {
    ncols: usize,
    nrows: usize,
    xll: f64,
    yll: f64,
    cellsize: f64,
    values: Vec<f64>,
}

/// Row and column of a cell (row 0 is the northern edge).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
}

impl Cell {
    pub fn new(row: usize, col: usize) -> Self {
        Cell { row, col }
    }
}

impl RasterGrid {
    pub fn new(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        values: Vec<f64>,
    ) -> Result<Self> {
        if ncols == 0 || nrows == 0 {
            return Err(Error::InvalidParameter("grid must have at least one cell".into()));
        }
        if !(cellsize > 0.0) || !cellsize.is_finite() {
            return Err(Error::InvalidParameter(format!("cellsize {cellsize} must be positive")));
        }
        if !xll.is_finite() || !yll.is_finite() {
            return Err(Error::NonFinite("grid origin".into()));
        }
        if values.len() != ncols * nrows {
            return Err(Error::Dimension(format!(
                "grid header says {nrows}x{ncols} = {} cells but {} values were given",
                ncols * nrows,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("grid value at index {i}")));
        }
        Ok(RasterGrid {
            ncols,
            nrows,
            xll,
            yll,
            cellsize,
            values,
        })
    }

    /// A grid with every cell set to `value`.
    pub fn filled(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        value: f64,
    ) -> Result<Self> {
        Self::new(ncols, nrows, xll, yll, cellsize, vec![value; ncols * nrows])
    }

    /// Builds a grid by evaluating `f(x, y)` at every cell center.
    pub fn from_fn(
        ncols: usize,
        nrows: usize,
        xll: f64,
        yll: f64,
        cellsize: f64,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(ncols * nrows);
        for row in 0..nrows {
            for col in 0..ncols {
                let x = xll + (col as f64 + 0.5) * cellsize;
                let y = yll + ((nrows - 1 - row) as f64 + 0.5) * cellsize;
                values.push(f(x, y));
            }
        }
        Self::new(ncols, nrows, xll, yll, cellsize, values)
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn xll(&self) -> f64 {
        self.xll
    }

    pub fn yll(&self) -> f64 {
        self.yll
    }

    pub fn cellsize(&self) -> f64 {
        self.cellsize
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn x_max(&self) -> f64 {
        self.xll + self.ncols as f64 * self.cellsize
    }

    pub fn y_max(&self) -> f64 {
        self.yll + self.nrows as f64 * self.cellsize
    }

    pub fn index(&self, cell: Cell) -> usize {
        cell.row * self.ncols + cell.col
    }

    pub fn cell_at(&self, index: usize) -> Cell {
        Cell::new(index / self.ncols, index % self.ncols)
    }

    pub fn value(&self, cell: Cell) -> f64 {
        self.values[self.index(cell)]
    }

    pub fn contains_cell(&self, row: i64, col: i64) -> bool {
        row >= 0 && col >= 0 && (row as usize) < self.nrows && (col as usize) < self.ncols
    }

    /// The cell containing `(x, y)`, or `None` outside the extent.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<Cell> {
        if !x.is_finite() || !y.is_finite() {
            return None;
        }
        let col = ((x - self.xll) / self.cellsize).floor();
        let from_south = ((y - self.yll) / self.cellsize).floor();
        if col < 0.0 || from_south < 0.0 {
            return None;
        }
        let (col, from_south) = (col as usize, from_south as usize);
        if col >= self.ncols || from_south >= self.nrows {
            return None;
        }
        Some(Cell::new(self.nrows - 1 - from_south, col))
    }

    /// South-west corner of a cell.
    pub fn cell_origin(&self, cell: Cell) -> (f64, f64) {
        (
            self.xll + cell.col as f64 * self.cellsize,
            self.yll + (self.nrows - 1 - cell.row) as f64 * self.cellsize,
        )
    }

    pub fn cell_center(&self, cell: Cell) -> (f64, f64) {
        let (x, y) = self.cell_origin(cell);
        (x + 0.5 * self.cellsize, y + 0.5 * self.cellsize)
    }

    /// True when both grids share header geometry.
    pub fn aligned_with(&self, other: &RasterGrid) -> bool {
        self.ncols == other.ncols
            && self.nrows == other.nrows
            && self.xll == other.xll
            && self.yll == other.yll
            && self.cellsize == other.cellsize
    }

    /// Same geometry with new values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.ncols, self.nrows, self.xll, self.yll, self.cellsize, values)
    }

    /// Shifted to mean 0 and (population) standard deviation 1 across cells.
    pub fn standardized(&self) -> Result<Self> {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        if !(var > 0.0) {
            return Err(Error::Data("cannot standardize a constant covariate surface".into()));
        }
        let sd = var.sqrt();
        self.with_values(self.values.iter().map(|v| (v - mean) / sd).collect())
    }

    pub fn to_ascii(&self) -> String {
        let mut out = String::new();
        writeln!(out, "ncols {}", self.ncols).unwrap();
        writeln!(out, "nrows {}", self.nrows).unwrap();
        writeln!(out, "xllcorner {}", self.xll).unwrap();
        writeln!(out, "yllcorner {}", self.yll).unwrap();
        writeln!(out, "cellsize {}", self.cellsize).unwrap();
        writeln!(out, "NODATA_value {}", NODATA).unwrap();
        for row in self.values.chunks(self.ncols) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(" ")).unwrap();
        }
        out
    }

    pub fn parse_ascii(text: &str, origin: &Path) -> Result<Self> {
        let mut lines = text.lines();
        let mut header = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(origin, format!("missing header line `{key}`")))?;
            let mut parts = line.split_whitespace();
            let name = parts.next().unwrap_or("");
            if !name.eq_ignore_ascii_case(key) {
                return Err(Error::format(
                    origin,
                    format!("expected header `{key}`, found `{name}`"),
                ));
            }
            parts
                .next()
                .map(str::to_string)
                .ok_or_else(|| Error::format(origin, format!("header `{key}` has no value")))
        };
        let parse_usize = |s: String, key: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format(origin, format!("bad `{key}` value `{s}`")))
        };
        let parse_f64 = |s: String, key: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::format(origin, format!("bad `{key}` value `{s}`")))
        };
        let ncols = parse_usize(header("ncols")?, "ncols")?;
        let nrows = parse_usize(header("nrows")?, "nrows")?;
        let xll = parse_f64(header("xllcorner")?, "xllcorner")?;
        let yll = parse_f64(header("yllcorner")?, "yllcorner")?;
        let cellsize = parse_f64(header("cellsize")?, "cellsize")?;
        let nodata = parse_f64(header("NODATA_value")?, "NODATA_value")?;
        let mut values = Vec::with_capacity(ncols * nrows);
        for tok in lines.flat_map(str::split_whitespace) {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format(origin, format!("bad grid value `{tok}`")))?;
            if v == nodata {
                return Err(Error::format(
                    origin,
                    format!("NODATA cell at value index {}", values.len()),
                ));
            }
            values.push(v);
        }
        if values.len() != ncols * nrows {
            return Err(Error::format(
                origin,
                format!(
                    "header declares {} cells but {} values follow",
                    ncols * nrows,
                    values.len()
                ),
            ));
        }
        RasterGrid::new(ncols, nrows, xll, yll, cellsize, values)
            .map_err(|e| Error::format(origin, e.to_string()))
    }

    pub fn read_ascii(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_ascii(&text, path)
    }

    pub fn write_ascii(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ascii()).map_err(|e| Error::io(path, e))
    }
}
