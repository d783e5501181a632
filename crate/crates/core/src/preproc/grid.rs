use crate::error::{Error, Result};

/// BEV grid geometry. Rows run along x (forward), columns along y.
/// Coordinate ranges are half-open: `[x_min, x_max) × [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    pub z_min: f64,
    pub z_max: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self::desk()
    }
}

impl GridSpec {
    /// 96×64 cells at 0.2 m; both dimensions divisible by 32.
    pub fn desk() -> Self {
        GridSpec {
            x_min: 0.0,
            x_max: 19.2,
            y_min: -6.4,
            y_max: 6.4,
            resolution: 0.2,
            z_min: -2.5,
            z_max: 1.5,
        }
    }

    /// 480×320 cells at 0.1 m over x ∈ [0, 48), y ∈ [−16, 16).
    pub fn paper() -> Self {
        GridSpec {
            x_min: 0.0,
            x_max: 48.0,
            y_min: -16.0,
            y_max: 16.0,
            resolution: 0.1,
            z_min: -2.5,
            z_max: 1.5,
        }
    }

    fn cells(lo: f64, hi: f64, res: f64) -> Option<usize> {
        let n = (hi - lo) / res;
        let rounded = n.round();
        ((n - rounded).abs() < 1e-6 && rounded >= 1.0).then_some(rounded as usize)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0) {
            return Err(Error::InvalidConfig("resolution must be positive".into()));
        }
        if Self::cells(self.x_min, self.x_max, self.resolution).is_none()
            || Self::cells(self.y_min, self.y_max, self.resolution).is_none()
        {
            return Err(Error::InvalidConfig(
                "grid extents must be positive integer multiples of the resolution".into(),
            ));
        }
        if !(self.z_min < self.z_max) {
            return Err(Error::InvalidConfig("z_min must be below z_max".into()));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        Self::cells(self.x_min, self.x_max, self.resolution).unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        Self::cells(self.y_min, self.y_max, self.resolution).unwrap_or(0)
    }

    /// Cell containing `(x, y)`, or `None` outside the half-open ranges.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        if !(x >= self.x_min && x < self.x_max && y >= self.y_min && y < self.y_max) {
            return None;
        }
        // Division can round a coordinate just below the upper bound onto
        // the bound itself; such points belong to the last cell.
        let r = (((x - self.x_min) / self.resolution).floor() as usize).min(self.rows() - 1);
        let c = (((y - self.y_min) / self.resolution).floor() as usize).min(self.cols() - 1);
        Some((r, c))
    }

    /// Normalized height encoding of `z`, clamped to `[0, 1]`.
    pub fn encode_height(&self, z: f64) -> f32 {
        (((z - self.z_min) / (self.z_max - self.z_min)).clamp(0.0, 1.0)) as f32
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("x_min", self.x_min),
            ("x_max", self.x_max),
            ("y_min", self.y_min),
            ("y_max", self.y_max),
            ("resolution", self.resolution),
            ("z_min", self.z_min),
            ("z_max", self.z_max),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
    }

    pub fn from_pairs(map: &std::collections::BTreeMap<&str, &str>) -> Result<Self> {
        let get = |k: &str| -> Result<f64> {
            let v = map
                .get(k)
                .ok_or_else(|| Error::InvalidConfig(format!("missing grid key `{k}`")))?;
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value {v:?} for `{k}`")))
        };
        let spec = GridSpec {
            x_min: get("x_min")?,
            x_max: get("x_max")?,
            y_min: get("y_min")?,
            y_max: get("y_max")?,
            resolution: get("resolution")?,
            z_min: get("z_min")?,
            z_max: get("z_max")?,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Row-major 2-D grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

/// Single-channel BEV image; values in `[0, 1]`, 0 = empty.
pub type BevImage = Grid<f32>;

impl<T: Clone + Default> Grid<T> {
    pub fn new(rows: usize, cols: usize) -> Self {
        Grid {
            rows,
            cols,
            data: vec![T::default(); rows * cols],
        }
    }

    pub fn for_spec(spec: &GridSpec) -> Self {
        Self::new(spec.rows(), spec.cols())
    }
}

impl<T: Copy> Grid<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} grid",
                data.len()
            )));
        }
        Ok(Grid { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Grid<U> {
        Grid {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}
