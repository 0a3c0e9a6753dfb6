use crate::model::network::{RoadNode, SegmentGeometry};
use crate::model::{LatLon, RoadNetwork, EARTH_RADIUS_M};

/// Upper bound on grid cells; coarser cells are used beyond it.
const MAX_CELLS: usize = 1 << 22;

/// Relative slack on query radii, covering the distortion of the single
/// equirectangular projection used for cell addressing.
const RADIUS_SLACK: f64 = 1.02;

/// Uniform grid over a network's bounding box mapping cells to segment positions.
#[derive(Debug, Clone)]
pub struct GridIndex {
    cell_size: f64,
    ref_cos: f64,
    min_x: f64,
    min_y: f64,
    nx: usize,
    ny: usize,
    cells: Vec<Vec<u32>>,
}

/// Builds a grid index over `network` with square cells of `cell_size` meters.
pub fn build_spatial_index(network: &RoadNetwork, cell_size: f64) -> GridIndex {
    GridIndex::build(network.nodes(), network.geometry(), cell_size)
}

impl GridIndex {
    pub(crate) fn build(nodes: &[RoadNode], geometry: &[SegmentGeometry], cell_size: f64) -> Self {
        assert!(cell_size > 0.0, "cell size must be positive");
        let (mut lat_min, mut lat_max) = (f64::INFINITY, f64::NEG_INFINITY);
        for n in nodes {
            lat_min = lat_min.min(n.lat);
            lat_max = lat_max.max(n.lat);
        }
        let ref_cos = ((lat_min + lat_max) / 2.0).to_radians().cos().max(1e-6);
        let project = |p: LatLon| project(p, ref_cos);

        let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
        let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for n in nodes {
            let (x, y) = project(n.position());
            min_x = min_x.min(x);
            min_y = min_y.min(y);
            max_x = max_x.max(x);
            max_y = max_y.max(y);
        }

        let mut cell_size = cell_size;
        let dims = |cs: f64| {
            (
                (((max_x - min_x) / cs).floor() as usize + 1),
                (((max_y - min_y) / cs).floor() as usize + 1),
            )
        };
        let (mut nx, mut ny) = dims(cell_size);
        while nx.saturating_mul(ny) > MAX_CELLS {
            cell_size *= 2.0;
            (nx, ny) = dims(cell_size);
        }

        let mut index = Self {
            cell_size,
            ref_cos,
            min_x,
            min_y,
            nx,
            ny,
            cells: vec![Vec::new(); nx * ny],
        };
        for (pos, g) in geometry.iter().enumerate() {
            let (ax, ay) = project(g.from);
            let (bx, by) = project(g.to);
            let (cx0, cx1) = index.cell_span(ax.min(bx), ax.max(bx), index.min_x, index.nx);
            let (cy0, cy1) = index.cell_span(ay.min(by), ay.max(by), index.min_y, index.ny);
            for cy in cy0..=cy1 {
                for cx in cx0..=cx1 {
                    index.cells[cy * nx + cx].push(pos as u32);
                }
            }
        }
        index
    }

    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn dimensions(&self) -> (usize, usize) {
        (self.nx, self.ny)
    }

    /// Clamped inclusive cell range covering `[lo, hi]` on one axis.
    fn cell_span(&self, lo: f64, hi: f64, origin: f64, n: usize) -> (usize, usize) {
        let to_cell = |v: f64| {
            let c = ((v - origin) / self.cell_size).floor();
            c.clamp(0.0, (n - 1) as f64) as usize
        };
        (to_cell(lo), to_cell(hi))
    }

    /// Positions of all segments whose bounding box comes within `radius`
    /// meters of `p`, sorted ascending (ascending position is ascending id).
    pub fn candidates(&self, p: LatLon, radius: f64) -> Vec<usize> {
        let (x, y) = project(p, self.ref_cos);
        let r = radius * RADIUS_SLACK + 1.0;
        let max_x = self.min_x + self.nx as f64 * self.cell_size;
        let max_y = self.min_y + self.ny as f64 * self.cell_size;
        if x + r < self.min_x || x - r > max_x || y + r < self.min_y || y - r > max_y {
            return Vec::new();
        }
        let (cx0, cx1) = self.cell_span(x - r, x + r, self.min_x, self.nx);
        let (cy0, cy1) = self.cell_span(y - r, y + r, self.min_y, self.ny);
        let mut out = Vec::new();
        for cy in cy0..=cy1 {
            for cx in cx0..=cx1 {
                out.extend(self.cells[cy * self.nx + cx].iter().map(|&s| s as usize));
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Cells containing at least one segment.
    pub fn occupied_cells(&self) -> usize {
        self.cells.iter().filter(|c| !c.is_empty()).count()
    }
}

fn project(p: LatLon, ref_cos: f64) -> (f64, f64) {
    (
        EARTH_RADIUS_M * p.lon.to_radians() * ref_cos,
        EARTH_RADIUS_M * p.lat.to_radians(),
    )
}
