//! Multi-view 2D rendering of volumes: per-plane mid-slices and
//! maximum-intensity projections.

use super::{Dims, Volume};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::io::{self, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    pub fn as_str(&self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl fmt::Display for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViewKind {
    MidSlice,
    MaxIntensityProjection,
}

impl ViewKind {
    pub const ALL: [ViewKind; 2] = [ViewKind::MidSlice, ViewKind::MaxIntensityProjection];

    pub fn as_str(&self) -> &'static str {
        match self {
            ViewKind::MidSlice => "mid-slice",
            ViewKind::MaxIntensityProjection => "max-intensity-projection",
        }
    }
}

impl fmt::Display for ViewKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A rendered 2D view with a human-readable caption naming plane and kind.
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub plane: Plane,
    pub kind: ViewKind,
    pub rows: usize,
    pub cols: usize,
    /// Row-major pixels in [0, 1].
    pub pixels: Vec<f32>,
    pub caption: String,
}

impl View {
    pub fn pixel(&self, row: usize, col: usize) -> f32 {
        self.pixels[row * self.cols + col]
    }
}

/// Which planes and kinds to render; the default covers all six
/// plane/kind combinations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewConfig {
    pub planes: Vec<Plane>,
    pub kinds: Vec<ViewKind>,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            planes: Plane::ALL.to_vec(),
            kinds: ViewKind::ALL.to_vec(),
        }
    }
}

fn view_shape(dims: Dims, plane: Plane) -> (usize, usize) {
    match plane {
        Plane::Axial => (dims.height, dims.width),
        Plane::Coronal => (dims.depth, dims.width),
        Plane::Sagittal => (dims.depth, dims.height),
    }
}

fn sample(volume: &Volume, plane: Plane, row: usize, col: usize, along: usize) -> f32 {
    let dims = volume.dims;
    let (z, y, x) = match plane {
        Plane::Axial => (along, row, col),
        Plane::Coronal => (row, along, col),
        Plane::Sagittal => (row, col, along),
    };
    volume.intensities[dims.index(z, y, x)]
}

fn projection_len(dims: Dims, plane: Plane) -> usize {
    match plane {
        Plane::Axial => dims.depth,
        Plane::Coronal => dims.height,
        Plane::Sagittal => dims.width,
    }
}

/// Renders `volume` into one view per (plane, kind) pair of `config`,
/// plane-major. Deterministic; a unit extent collapses the projection to
/// the single available slice rather than erroring.
pub fn render_views(volume: &Volume, config: &ViewConfig) -> Vec<View> {
    let dims = volume.dims;
    let mut views = Vec::with_capacity(config.planes.len() * config.kinds.len());
    for &plane in &config.planes {
        let (rows, cols) = view_shape(dims, plane);
        let len = projection_len(dims, plane);
        for &kind in &config.kinds {
            let mut pixels = vec![0f32; rows * cols];
            for row in 0..rows {
                for col in 0..cols {
                    let value = match kind {
                        ViewKind::MidSlice => sample(volume, plane, row, col, len / 2),
                        ViewKind::MaxIntensityProjection => (0..len)
                            .map(|along| sample(volume, plane, row, col, along))
                            .fold(0f32, f32::max),
                    };
                    pixels[row * cols + col] = value;
                }
            }
            views.push(View {
                plane,
                kind,
                rows,
                cols,
                pixels,
                caption: format!("{plane} {kind}"),
            });
        }
    }
    views
}

/// Writes a view as a binary PGM (P5) image for quick inspection.
pub fn write_pgm<W: Write>(view: &View, writer: &mut W) -> io::Result<()> {
    write!(writer, "P5\n{} {}\n255\n", view.cols, view.rows)?;
    let bytes: Vec<u8> = view
        .pixels
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    writer.write_all(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_volume(dims: Dims, value: f32) -> Volume {
        Volume {
            id: "test".into(),
            dims,
            spacing: [1.0, 1.0, 1.0],
            intensities: vec![value; dims.voxel_count()],
        }
    }

    #[test]
    fn constant_volume_renders_six_constant_views() {
        let volume = constant_volume(Dims::new(4, 4, 4), 0.5);
        let views = render_views(&volume, &ViewConfig::default());
        assert_eq!(views.len(), 6);
        for view in &views {
            assert!(view.pixels.iter().all(|&p| p == 0.5), "{}", view.caption);
        }
    }

    #[test]
    fn captions_enumerate_plane_and_kind() {
        let volume = constant_volume(Dims::new(2, 3, 4), 0.0);
        let captions: Vec<String> = render_views(&volume, &ViewConfig::default())
            .into_iter()
            .map(|v| v.caption)
            .collect();
        assert_eq!(
            captions,
            vec![
                "axial mid-slice",
                "axial max-intensity-projection",
                "coronal mid-slice",
                "coronal max-intensity-projection",
                "sagittal mid-slice",
                "sagittal max-intensity-projection",
            ]
        );
    }

    #[test]
    fn single_hot_voxel_lands_at_projected_coordinates() {
        let dims = Dims::new(4, 4, 4);
        let mut volume = constant_volume(dims, 0.0);
        volume.intensities[dims.index(1, 2, 3)] = 1.0;
        let views = render_views(&volume, &ViewConfig::default());
        let axial_mip = views
            .iter()
            .find(|v| v.caption == "axial max-intensity-projection")
            .unwrap();
        for row in 0..4 {
            for col in 0..4 {
                let expected = if (row, col) == (2, 3) { 1.0 } else { 0.0 };
                assert_eq!(axial_mip.pixel(row, col), expected);
            }
        }
    }

    #[test]
    fn mip_matches_brute_force_projection() {
        // Independent oracle: explicit per-axis max loops over a random volume.
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let dims = Dims::new(3, 4, 5);
        let volume = Volume {
            id: "rand".into(),
            dims,
            spacing: [1.0; 3],
            intensities: (0..dims.voxel_count())
                .map(|_| rng.random::<f32>())
                .collect(),
        };
        let views = render_views(&volume, &ViewConfig::default());
        let sagittal_mip = views
            .iter()
            .find(|v| v.caption == "sagittal max-intensity-projection")
            .unwrap();
        for z in 0..dims.depth {
            for y in 0..dims.height {
                let mut best = 0f32;
                for x in 0..dims.width {
                    best = best.max(volume.intensities[dims.index(z, y, x)]);
                }
                assert_eq!(sagittal_mip.pixel(z, y), best);
            }
        }
    }

    #[test]
    fn unit_depth_collapses_axial_projection_to_slice() {
        let dims = Dims::new(1, 3, 3);
        let mut volume = constant_volume(dims, 0.2);
        volume.intensities[dims.index(0, 1, 1)] = 0.9;
        let views = render_views(&volume, &ViewConfig::default());
        let mid = views
            .iter()
            .find(|v| v.caption == "axial mid-slice")
            .unwrap();
        let mip = views
            .iter()
            .find(|v| v.caption == "axial max-intensity-projection")
            .unwrap();
        assert_eq!(mid.pixels, mip.pixels);
    }

    #[test]
    fn rendering_is_deterministic() {
        let dims = Dims::new(3, 3, 3);
        let mut volume = constant_volume(dims, 0.1);
        volume.intensities[5] = 0.7;
        let a = render_views(&volume, &ViewConfig::default());
        let b = render_views(&volume, &ViewConfig::default());
        assert_eq!(a, b);
    }

    #[test]
    fn pgm_header_and_payload() {
        let view = View {
            plane: Plane::Axial,
            kind: ViewKind::MidSlice,
            rows: 2,
            cols: 3,
            pixels: vec![0.0, 0.5, 1.0, 1.0, 0.5, 0.0],
            caption: "axial mid-slice".into(),
        };
        let mut buf = Vec::new();
        write_pgm(&view, &mut buf).unwrap();
        assert!(buf.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(buf.len(), b"P5\n3 2\n255\n".len() + 6);
        assert_eq!(buf[buf.len() - 6], 0);
        assert_eq!(buf[buf.len() - 4], 255);
    }
}
