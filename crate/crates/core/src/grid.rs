//! Nested structured-grid hierarchy.
//!
//! Every level is an axis-aligned box of uniform cells. Cells are stored in
//! x-fastest linear order. Each level carries a ring of embedding cells
//! around the physical domain; the embedding width is expressed in cells of
//! the coarsest level and scales with refinement so the padded box is the
//! same physical region on every level.
//!
//! Piecewise-constant coefficients make the mass matrix `W` diagonal and the
//! prolongation `P` pure injection. The restriction is
//! `Π = W_c⁻¹ Pᵀ W_f`, a volume-weighted average over child cells, so
//! `Π P = I`.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Axis-aligned bounding box of the physical domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Extent {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "extent bounds have mismatched dimensions ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (a, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidArgument(format!(
                    "extent axis {a} is empty or non-finite: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// The unit box `[0, 1]^d`.
    pub fn unit(dimension: usize) -> Self {
        Self {
            lower: vec![0.0; dimension],
            upper: vec![1.0; dimension],
        }
    }

    pub fn dimension(&self) -> usize {
        self.lower.len()
    }

    pub fn length(&self, axis: usize) -> f64 {
        self.upper[axis] - self.lower[axis]
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dimension()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(x, (lo, hi))| *x >= *lo && *x <= *hi)
    }
}

/// One level of the hierarchy.
#[derive(Debug, Clone, PartialEq)]
pub struct GridLevel {
    level_index: usize,
    dims: Vec<usize>,
    padding: Vec<usize>,
    cell_size: Vec<f64>,
    physical_extent: Extent,
    mass_diagonal: Vec<f64>,
}

impl GridLevel {
    fn new(
        level_index: usize,
        dims: Vec<usize>,
        padding: Vec<usize>,
        cell_size: Vec<f64>,
        physical_extent: Extent,
    ) -> Self {
        let volume: f64 = cell_size.iter().product();
        let padded: usize = dims.iter().zip(&padding).map(|(n, p)| n + 2 * p).product();
        Self {
            level_index,
            dims,
            padding,
            cell_size,
            physical_extent,
            mass_diagonal: vec![volume; padded],
        }
    }

    pub fn level_index(&self) -> usize {
        self.level_index
    }

    pub fn dimension(&self) -> usize {
        self.dims.len()
    }

    /// Physical cells per axis.
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Embedding cells added on each side, per axis.
    pub fn padding(&self) -> &[usize] {
        &self.padding
    }

    pub fn padded_dims(&self) -> Vec<usize> {
        self.dims.iter().zip(&self.padding).map(|(n, p)| n + 2 * p).collect()
    }

    pub fn cell_size(&self) -> &[f64] {
        &self.cell_size
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_size.iter().product()
    }

    pub fn physical_extent(&self) -> &Extent {
        &self.physical_extent
    }

    /// The physical box grown by the embedding ring.
    pub fn padded_extent(&self) -> Extent {
        let d = self.dimension();
        let mut lower = Vec::with_capacity(d);
        let mut upper = Vec::with_capacity(d);
        for a in 0..d {
            let pad = self.padding[a] as f64 * self.cell_size[a];
            lower.push(self.physical_extent.lower[a] - pad);
            upper.push(self.physical_extent.upper[a] + pad);
        }
        Extent { lower, upper }
    }

    /// Diagonal of the mass matrix `W` over the padded grid.
    pub fn mass_diagonal(&self) -> &[f64] {
        &self.mass_diagonal
    }

    /// Number of cells on the padded grid (the white-noise dimension).
    pub fn num_cells(&self) -> usize {
        self.mass_diagonal.len()
    }

    pub fn num_physical_cells(&self) -> usize {
        self.dims.iter().product()
    }

    /// Linear index on the padded grid of the physical cell with linear
    /// index `physical` (both x-fastest).
    pub fn physical_to_padded(&self, physical: usize) -> usize {
        let padded = self.padded_dims();
        let mut rem = physical;
        let mut index = 0;
        let mut stride = 1;
        for a in 0..self.dimension() {
            let i = rem % self.dims[a];
            rem /= self.dims[a];
            index += (i + self.padding[a]) * stride;
            stride *= padded[a];
        }
        index
    }

    /// Copies the physical cells out of a padded vector.
    pub fn restrict_to_physical(&self, padded_values: &[f64]) -> Result<Vec<f64>> {
        check_len(self.num_cells(), padded_values.len())?;
        Ok((0..self.num_physical_cells())
            .map(|i| padded_values[self.physical_to_padded(i)])
            .collect())
    }

    /// Multi-index of a physical cell.
    pub fn physical_multi_index(&self, physical: usize) -> Vec<usize> {
        let mut rem = physical;
        self.dims
            .iter()
            .map(|n| {
                let i = rem % n;
                rem /= n;
                i
            })
            .collect()
    }

    pub fn physical_linear_index(&self, multi: &[usize]) -> usize {
        let mut index = 0;
        let mut stride = 1;
        for (i, n) in multi.iter().zip(&self.dims) {
            index += i * stride;
            stride *= n;
        }
        index
    }

    /// Centre of a physical cell.
    pub fn physical_cell_center(&self, physical: usize) -> Vec<f64> {
        self.physical_multi_index(physical)
            .iter()
            .enumerate()
            .map(|(a, &i)| self.physical_extent.lower[a] + (i as f64 + 0.5) * self.cell_size[a])
            .collect()
    }

    pub fn apply_mass(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.scale_by(values, |w| w)
    }

    pub fn apply_mass_sqrt(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.scale_by(values, f64::sqrt)
    }

    pub fn apply_mass_inv_sqrt(&self, values: &[f64]) -> Result<Vec<f64>> {
        self.scale_by(values, |w| 1.0 / w.sqrt())
    }

    fn scale_by(&self, values: &[f64], f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        check_len(self.num_cells(), values.len())?;
        Ok(values.iter().zip(&self.mass_diagonal).map(|(v, w)| v * f(*w)).collect())
    }
}

/// Ordered list of nested levels, coarsest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    levels: Vec<GridLevel>,
    refinement_factor: usize,
    /// `parents[l][i]` is the level-`l` cell containing cell `i` of level `l + 1`.
    parents: Vec<Vec<usize>>,
}

impl Hierarchy {
    /// Builds a hierarchy refined by a factor of two per level.
    pub fn build(coarse_dims: &[usize], num_levels: usize, physical_extent: Extent, padding: &[usize]) -> Result<Self> {
        Self::build_with_factor(coarse_dims, num_levels, physical_extent, padding, 2)
    }

    pub fn build_with_factor(
        coarse_dims: &[usize],
        num_levels: usize,
        physical_extent: Extent,
        padding: &[usize],
        refinement_factor: usize,
    ) -> Result<Self> {
        let d = coarse_dims.len();
        if !(2..=3).contains(&d) {
            return Err(Error::InvalidArgument(format!(
                "grids must be two- or three-dimensional, got {d} axes"
            )));
        }
        if let Some(n) = coarse_dims.iter().find(|&&n| n < 2) {
            return Err(Error::InvalidArgument(format!(
                "coarse grid needs at least 2 cells per axis, got {n}"
            )));
        }
        if num_levels == 0 {
            return Err(Error::InvalidArgument("hierarchy needs at least one level".into()));
        }
        if refinement_factor < 2 {
            return Err(Error::InvalidArgument(format!(
                "refinement factor must be at least 2, got {refinement_factor}"
            )));
        }
        check_len(d, padding.len())?;
        check_len(d, physical_extent.dimension())?;

        let mut levels = Vec::with_capacity(num_levels);
        let mut scale = 1usize;
        let mut spacing: Vec<f64> = (0..d)
            .map(|a| physical_extent.length(a) / coarse_dims[a] as f64)
            .collect();
        for level in 0..num_levels {
            let dims = coarse_dims.iter().map(|n| n * scale).collect();
            let pad = padding.iter().map(|p| p * scale).collect();
            levels.push(GridLevel::new(
                level,
                dims,
                pad,
                spacing.clone(),
                physical_extent.clone(),
            ));
            scale = scale
                .checked_mul(refinement_factor)
                .ok_or_else(|| Error::InvalidArgument("hierarchy size overflows".into()))?;
            for h in &mut spacing {
                *h /= refinement_factor as f64;
            }
        }

        let parents = levels
            .windows(2)
            .map(|pair| parent_map(&pair[0], &pair[1], refinement_factor))
            .collect();
        Ok(Self {
            levels,
            refinement_factor,
            parents,
        })
    }

    pub fn levels(&self) -> &[GridLevel] {
        &self.levels
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn refinement_factor(&self) -> usize {
        self.refinement_factor
    }

    pub fn level(&self, level: usize) -> Result<&GridLevel> {
        self.levels.get(level).ok_or(Error::LevelOutOfRange {
            level,
            num_levels: self.levels.len(),
        })
    }

    pub fn finest(&self) -> &GridLevel {
        self.levels.last().expect("hierarchy is never empty")
    }

    fn pair(&self, coarse: usize) -> Result<(&GridLevel, &GridLevel, &[usize])> {
        if coarse + 1 >= self.levels.len() {
            return Err(Error::LevelOutOfRange {
                level: coarse + 1,
                num_levels: self.levels.len(),
            });
        }
        Ok((&self.levels[coarse], &self.levels[coarse + 1], &self.parents[coarse]))
    }

    /// `P`: each fine cell on level `coarse + 1` takes the value of its parent.
    pub fn prolongate(&self, coarse_values: &[f64], coarse: usize) -> Result<Vec<f64>> {
        let (c, _, parents) = self.pair(coarse)?;
        check_len(c.num_cells(), coarse_values.len())?;
        Ok(parents.iter().map(|&p| coarse_values[p]).collect())
    }

    /// `Pᵀ`: sums child values into their parent.
    pub fn prolongate_transpose(&self, fine_values: &[f64], coarse: usize) -> Result<Vec<f64>> {
        let (c, f, parents) = self.pair(coarse)?;
        check_len(f.num_cells(), fine_values.len())?;
        let mut out = vec![0.0; c.num_cells()];
        for (v, &p) in fine_values.iter().zip(parents) {
            out[p] += v;
        }
        Ok(out)
    }

    /// `Π = W_c⁻¹ Pᵀ W_f`: volume-weighted average over child cells.
    pub fn restrict(&self, fine_values: &[f64], coarse: usize) -> Result<Vec<f64>> {
        let (c, f, parents) = self.pair(coarse)?;
        check_len(f.num_cells(), fine_values.len())?;
        let mut out = vec![0.0; c.num_cells()];
        for ((v, w), &p) in fine_values.iter().zip(f.mass_diagonal()).zip(parents) {
            out[p] += w * v;
        }
        for (o, w) in out.iter_mut().zip(c.mass_diagonal()) {
            *o /= w;
        }
        Ok(out)
    }

    /// `Πᵀ = W_f P W_c⁻¹`: spreads a coarse load over the children in
    /// proportion to their volume.
    pub fn restrict_transpose(&self, coarse_values: &[f64], coarse: usize) -> Result<Vec<f64>> {
        let (c, f, parents) = self.pair(coarse)?;
        check_len(c.num_cells(), coarse_values.len())?;
        let wc = c.mass_diagonal();
        Ok(parents
            .iter()
            .zip(f.mass_diagonal())
            .map(|(&p, w)| w * coarse_values[p] / wc[p])
            .collect())
    }
}

fn parent_map(coarse: &GridLevel, fine: &GridLevel, factor: usize) -> Vec<usize> {
    let fine_dims = fine.padded_dims();
    let coarse_dims = coarse.padded_dims();
    let mut parents = Vec::with_capacity(fine.num_cells());
    let mut multi = vec![0usize; fine_dims.len()];
    for _ in 0..fine.num_cells() {
        let mut index = 0;
        let mut stride = 1;
        for (a, &m) in multi.iter().enumerate() {
            index += (m / factor) * stride;
            stride *= coarse_dims[a];
        }
        parents.push(index);
        for (a, m) in multi.iter_mut().enumerate() {
            *m += 1;
            if *m < fine_dims[a] {
                break;
            }
            *m = 0;
        }
    }
    parents
}

/// Embedding width of one correlation length, in cells: `ceil(λ / h)`.
pub fn default_padding(correlation_length: f64, cell_size: &[f64]) -> Vec<usize> {
    cell_size
        .iter()
        .map(|h| (correlation_length / h - 1e-9).ceil().max(0.0) as usize)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit2(n: usize, levels: usize, pad: usize) -> Hierarchy {
        Hierarchy::build(&[n, n], levels, Extent::unit(2), &[pad, pad]).unwrap()
    }

    #[test]
    fn cell_counts_of_a_four_level_cube() {
        let h = Hierarchy::build(&[16, 16, 16], 4, Extent::unit(3), &[0, 0, 0]).unwrap();
        let counts: Vec<usize> = h.levels().iter().map(|l| l.num_cells()).collect();
        assert_eq!(counts, vec![4096, 32768, 262144, 2097152]);
    }

    #[test]
    fn single_level() {
        let h = unit2(8, 1, 0);
        assert_eq!(h.num_levels(), 1);
        assert_eq!(h.level(0).unwrap().num_cells(), 64);
        assert!(h.prolongate(&[0.0; 64], 0).is_err());
    }

    #[test]
    fn padding_scales_with_refinement() {
        let h = unit2(4, 3, 2);
        assert_eq!(h.level(0).unwrap().padded_dims(), vec![8, 8]);
        assert_eq!(h.level(2).unwrap().padded_dims(), vec![32, 32]);
        let e0 = h.level(0).unwrap().padded_extent();
        let e2 = h.level(2).unwrap().padded_extent();
        assert_eq!(e0, e2);
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(Hierarchy::build(&[0, 4], 2, Extent::unit(2), &[0, 0]).is_err());
        assert!(Hierarchy::build(&[4, 4], 0, Extent::unit(2), &[0, 0]).is_err());
        assert!(Hierarchy::build(&[4], 1, Extent::unit(1), &[0]).is_err());
        assert!(Extent::new(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
    }

    #[test]
    fn unit_vector_prolongates_to_its_children() {
        let h = unit2(2, 2, 0);
        let e = vec![0.0, 1.0, 0.0, 0.0];
        let fine = h.prolongate(&e, 0).unwrap();
        // coarse cell 1 is (1, 0): fine cells (2..4, 0..2)
        let expected: Vec<usize> = vec![2, 3, 6, 7];
        for (i, v) in fine.iter().enumerate() {
            assert_eq!(*v, if expected.contains(&i) { 1.0 } else { 0.0 });
        }
    }

    #[test]
    fn restriction_averages_children() {
        let h = unit2(2, 2, 0);
        let mut fine = vec![0.0; 16];
        for (k, i) in [0usize, 1, 4, 5].iter().enumerate() {
            fine[*i] = (k + 1) as f64;
        }
        let coarse = h.restrict(&fine, 0).unwrap();
        assert!((coarse[0] - 2.5).abs() < 1e-15);
        assert_eq!(&coarse[1..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn mass_on_unit_square() {
        let h = unit2(4, 1, 0);
        let l = h.level(0).unwrap();
        let w = l.apply_mass(&[1.0; 16]).unwrap();
        assert!(w.iter().all(|&v| v == 1.0 / 16.0));
        let v: Vec<f64> = (0..16).map(|i| i as f64 - 3.5).collect();
        let back = l.apply_mass_inv_sqrt(&l.apply_mass_sqrt(&v).unwrap()).unwrap();
        for (a, b) in v.iter().zip(&back) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(l.apply_mass(&[1.0]).is_err());
    }

    #[test]
    fn physical_region_maps_into_padding() {
        let h = unit2(4, 2, 1);
        let l = h.level(1).unwrap();
        assert_eq!(l.padded_dims(), vec![12, 12]);
        // first physical cell sits past two padding rows and columns
        assert_eq!(l.physical_to_padded(0), 2 * 12 + 2);
        let padded: Vec<f64> = (0..l.num_cells()).map(|i| i as f64).collect();
        let phys = l.restrict_to_physical(&padded).unwrap();
        assert_eq!(phys.len(), 64);
        assert_eq!(phys[8], (3 * 12 + 2) as f64);
        let c = l.physical_cell_center(9);
        assert!((c[0] - 0.1875).abs() < 1e-15 && (c[1] - 0.1875).abs() < 1e-15);
    }

    #[test]
    fn default_padding_is_one_correlation_length() {
        assert_eq!(default_padding(0.3, &[1.0 / 16.0, 1.0 / 16.0]), vec![5, 5]);
        assert_eq!(default_padding(0.25, &[0.125]), vec![2]);
    }
}
