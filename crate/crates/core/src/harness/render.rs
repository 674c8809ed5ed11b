//! Equirectangular PNG rendering of spherical fields and an ERP loader.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::ArrayView2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::icosphere::IcosphereMesh;
use crate::so3::{erp_pixel_coords, erp_pixel_direction, Raster};
use crate::transfer::nearest_vertex;

pub const MIN_HEIGHT: usize = 16;

/// Class colours; class 0 (unknown) is black.
pub const PALETTE: [[u8; 3]; 14] = [
    [0, 0, 0],
    [128, 64, 128],
    [244, 35, 232],
    [70, 70, 70],
    [102, 102, 156],
    [190, 153, 153],
    [153, 153, 153],
    [250, 170, 30],
    [220, 220, 0],
    [107, 142, 35],
    [152, 251, 152],
    [70, 130, 180],
    [220, 20, 60],
    [0, 0, 142],
];

/// 8-bit RGB image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, r: usize, c: usize) -> [u8; 3] {
        let k = 3 * (r * self.width + c);
        [self.data[k], self.data[k + 1], self.data[k + 2]]
    }
}

/// Nearest mesh node of every ERP pixel centre for a `H × 2H` raster.
pub fn nearest_node_raster(mesh: &IcosphereMesh, height: usize) -> Result<Vec<u32>> {
    if height < MIN_HEIGHT {
        return Err(Error::Precondition(format!("render height must be at least {MIN_HEIGHT}, got {height}")));
    }
    let width = 2 * height;
    Ok((0..height * width)
        .into_par_iter()
        .map(|k| nearest_vertex(&erp_pixel_direction(k / width, k % width, height, width), &mesh.vertices))
        .collect())
}

fn paint(mesh: &IcosphereMesh, height: usize, color: impl Fn(usize) -> [u8; 3] + Sync) -> Result<RgbImage> {
    let nn = nearest_node_raster(mesh, height)?;
    let data = nn.par_iter().flat_map_iter(|&i| color(i as usize)).collect();
    Ok(RgbImage {
        height,
        width: 2 * height,
        data,
    })
}

pub fn render_labels(labels: &[u32], mesh: &IcosphereMesh, height: usize) -> Result<RgbImage> {
    if labels.len() != mesh.len() {
        return Err(Error::Data(format!("{} labels for a mesh of {} nodes", labels.len(), mesh.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y as usize >= PALETTE.len()) {
        return Err(Error::Data(format!("label {bad} has no palette colour")));
    }
    paint(mesh, height, |i| PALETTE[labels[i] as usize])
}

/// Three channels are shown as RGB clamped to `[0, 1]`; any other channel
/// count shows the first channel as grey, min-max normalized.
pub fn render_field(field: ArrayView2<'_, f64>, mesh: &IcosphereMesh, height: usize) -> Result<RgbImage> {
    if field.nrows() != mesh.len() || field.ncols() == 0 {
        return Err(Error::Data(format!("field of shape {:?} on a mesh of {} nodes", field.dim(), mesh.len())));
    }
    if field.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("field contains non-finite values".into()));
    }
    let to_u8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    if field.ncols() == 3 {
        return paint(mesh, height, |i| [0, 1, 2].map(|c| to_u8(field[[i, c]])));
    }
    let col = field.column(0);
    let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    paint(mesh, height, |i| [to_u8((col[i] - lo) / span); 3])
}

/// Sample a label image back at node directions by nearest pixel.
pub fn labels_from_image(img: &RgbImage, mesh: &IcosphereMesh) -> Result<Vec<u32>> {
    mesh.vertices
        .iter()
        .map(|p| {
            let (row, col) = erp_pixel_coords(p, img.height, img.width);
            let r = (row + 0.5).floor().clamp(0.0, img.height as f64 - 1.0) as usize;
            let c = ((col + 0.5).floor() as i64).rem_euclid(img.width as i64) as usize;
            let px = img.pixel(r, c);
            PALETTE
                .iter()
                .position(|&q| q == px)
                .map(|k| k as u32)
                .ok_or_else(|| Error::Data(format!("pixel colour {px:?} is not in the palette")))
        })
        .collect()
}

pub fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, img.width as u32, img.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Data(format!("png: {e}")))?;
    writer.write_image_data(&img.data).map_err(|e| Error::Data(format!("png: {e}")))?;
    writer.finish().map_err(|e| Error::Data(format!("png: {e}")))?;
    Ok(())
}

/// Load an 8-bit grey, grey-alpha, RGB or RGBA PNG as RGB.
pub fn read_png(path: &Path) -> Result<RgbImage> {
    let bad = |e: png::DecodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let data: Vec<u8> = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        png::ColorType::Grayscale => buf.iter().flat_map(|&g| [g; 3]).collect(),
        png::ColorType::GrayscaleAlpha => buf.chunks_exact(2).flat_map(|p| [p[0]; 3]).collect(),
        png::ColorType::Indexed => return Err(Error::Data("unexpanded palette image".into())),
    };
    Ok(RgbImage { height: h, width: w, data })
}

/// Equirectangular image as a `[0, 1]` raster; the aspect must be 2:1.
pub fn load_erp(path: &Path) -> Result<Raster> {
    let img = read_png(path)?;
    if img.width != 2 * img.height {
        return Err(Error::Data(format!("{} is {}x{}, not a 2:1 panorama", path.display(), img.width, img.height)));
    }
    Ok(Raster {
        height: img.height,
        width: img.width,
        channels: 3,
        data: img.data.iter().map(|&v| v as f64 / 255.0).collect(),
    })
}

/// Per-node features sampled from an ERP raster by nearest pixel.
pub fn sample_erp(raster: &Raster, mesh: &IcosphereMesh) -> ndarray::Array2<f64> {
    let (h, w) = (raster.height, raster.width);
    ndarray::Array2::from_shape_fn((mesh.len(), raster.channels), |(i, ch)| {
        let (row, col) = erp_pixel_coords(&mesh.vertices[i], h, w);
        let r = (row + 0.5).floor().clamp(0.0, h as f64 - 1.0) as usize;
        let c = ((col + 0.5).floor() as i64).rem_euclid(w as i64) as usize;
        raster.at(r, c, ch)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::{sample_scene, SceneStyle};
    use crate::icosphere::build_icosphere;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_field_renders_uniform_2_to_1() {
        let mesh = build_icosphere(2).unwrap();
        let img = render_labels(&vec![5; mesh.len()], &mesh, 16).unwrap();
        assert_eq!((img.height, img.width), (16, 32));
        assert!(img.data.chunks_exact(3).all(|p| p == PALETTE[5]));
        assert!(render_labels(&vec![5; mesh.len()], &mesh, 8).is_err());
    }

    #[test]
    fn labels_survive_render_round_trip() {
        for rank in 0..=3 {
            let mesh = build_icosphere(rank).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(rank as u64);
            let scene = sample_scene(&SceneStyle::default(), &mut rng);
            let labels = scene.labels_on(&mesh);
            let h = (8 << rank).max(MIN_HEIGHT);
            let img = render_labels(&labels, &mesh, h).unwrap();
            assert_eq!(labels_from_image(&img, &mesh).unwrap(), labels, "rank {rank}");
        }
    }

    #[test]
    fn png_round_trip() {
        let mesh = build_icosphere(1).unwrap();
        let labels: Vec<u32> = (0..mesh.len() as u32).map(|i| i % 14).collect();
        let img = render_labels(&labels, &mesh, 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        write_png(&img, &path).unwrap();
        assert_eq!(read_png(&path).unwrap(), img);
        let r = load_erp(&path).unwrap();
        assert_eq!((r.height, r.width, r.channels), (16, 32, 3));
        assert_eq!(sample_erp(&r, &mesh).nrows(), mesh.len());
    }
}
