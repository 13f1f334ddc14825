//! Artifact persistence: PGM depth/traversability images, CSV logs, the
//! binary dataset format with its JSON manifest, model files, and the
//! overview plot PNG.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read as _, Write as _};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::camera::DepthImage;
use crate::error::{Error, Result};
use crate::grid::{Grid2, TraversabilityMap};
use crate::kinodynamics::{State2D, Trajectory};
use crate::model::{ModelConfig, TravNet};
use crate::trainer::TrainingTuple;
use crate::world::World;

/// Depth image as binary 16-bit PGM, values in millimeters (0 = invalid).
pub fn write_depth_pgm(path: &Path, img: &DepthImage) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n65535\n", img.width, img.height)?;
    for &d in &img.data {
        let mm = (d * 1000.0).round().clamp(0.0, 65535.0) as u16;
        w.write_all(&mm.to_be_bytes())?;
    }
    Ok(())
}

pub fn read_depth_pgm(path: &Path) -> Result<DepthImage> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let (width, height, maxval, data_off) = parse_pgm_header(&buf)?;
    if maxval != 65535 {
        return Err(Error::InvalidInput("depth PGM must be 16-bit".into()));
    }
    let n = width * height;
    if buf.len() < data_off + 2 * n {
        return Err(Error::InvalidInput("truncated depth PGM".into()));
    }
    let data = (0..n)
        .map(|i| {
            let mm = u16::from_be_bytes([buf[data_off + 2 * i], buf[data_off + 2 * i + 1]]);
            mm as f64 / 1000.0
        })
        .collect();
    Ok(DepthImage { width, height, data })
}

/// Traversability channel as binary 8-bit PGM with round(255·value).
pub fn write_trav_pgm(path: &Path, grid: &Grid2) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n{} {}\n255\n", grid.nx, grid.ny)?;
    // top row of the file = highest y, so the image reads map-like
    for iy in (0..grid.ny).rev() {
        for ix in 0..grid.nx {
            let v = grid.data[iy * grid.nx + ix];
            w.write_all(&[(v * 255.0).round().clamp(0.0, 255.0) as u8])?;
        }
    }
    Ok(())
}

pub fn read_trav_pgm(path: &Path, origin: (f64, f64), cell: f64) -> Result<Grid2> {
    let mut r = BufReader::new(File::open(path)?);
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let (width, height, maxval, data_off) = parse_pgm_header(&buf)?;
    if maxval != 255 {
        return Err(Error::InvalidInput("traversability PGM must be 8-bit".into()));
    }
    if buf.len() < data_off + width * height {
        return Err(Error::InvalidInput("truncated traversability PGM".into()));
    }
    let mut grid = Grid2::filled(width, height, origin, cell, 0.0);
    for iy in 0..height {
        for ix in 0..width {
            let row = height - 1 - iy; // undo the map-like flip
            grid.data[iy * width + ix] = buf[data_off + row * width + ix] as f64 / 255.0;
        }
    }
    Ok(grid)
}

fn parse_pgm_header(buf: &[u8]) -> Result<(usize, usize, usize, usize)> {
    let bad = || Error::InvalidInput("malformed PGM header".into());
    if buf.len() < 2 || &buf[0..2] != b"P5" {
        return Err(bad());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // skip whitespace and comment lines
        loop {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < buf.len() && buf[pos].is_ascii_digit() {
            pos += 1;
        }
        if pos == start {
            return Err(bad());
        }
        *f = std::str::from_utf8(&buf[start..pos]).map_err(|_| bad())?.parse().map_err(|_| bad())?;
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= buf.len() || !buf[pos].is_ascii_whitespace() {
        return Err(bad());
    }
    Ok((fields[0], fields[1], fields[2], pos + 1))
}

/// Minimal CSV writer: header row then one row per record.
pub struct CsvWriter {
    w: BufWriter<File>,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", header.join(","))?;
        Ok(Self { w, columns: header.len() })
    }

    pub fn row(&mut self, values: &[String]) -> Result<()> {
        if values.len() != self.columns {
            return Err(Error::InvalidInput(format!(
                "csv row has {} values, expected {}",
                values.len(),
                self.columns
            )));
        }
        writeln!(self.w, "{}", values.join(","))?;
        Ok(())
    }

    pub fn row_f64(&mut self, values: &[f64]) -> Result<()> {
        let vs: Vec<String> = values.iter().map(|v| format!("{v}")).collect();
        self.row(&vs)
    }

    pub fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

pub fn write_trajectory_csv(path: &Path, traj: &Trajectory) -> Result<()> {
    let mut w = CsvWriter::create(path, &["t", "px", "py", "theta"])?;
    for (i, s) in traj.states.iter().enumerate() {
        w.row_f64(&[i as f64 * traj.dt, s.px, s.py, s.theta])?;
    }
    w.finish()
}

pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header: Vec<String> =
        lines.next().ok_or_else(|| Error::InvalidInput("empty csv".into()))?.split(',').map(String::from).collect();
    let mut rows = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|v| v.trim().parse::<f64>().map_err(|e| Error::InvalidInput(format!("bad csv value: {e}"))))
            .collect::<Result<_>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

/// Index of every artifact a command emits under its output directory.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub kind: String,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

impl Manifest {
    pub fn new(command: &str, seed: u64) -> Self {
        Self { command: command.into(), seed, entries: Vec::new() }
    }

    pub fn add(&mut self, kind: &str, path: &str) {
        self.entries.push(ManifestEntry { kind: kind.into(), path: path.into(), count: None });
    }

    pub fn add_counted(&mut self, kind: &str, path: &str, count: usize) {
        self.entries.push(ManifestEntry { kind: kind.into(), path: path.into(), count: Some(count) });
    }

    pub fn save(&self, out_dir: &Path) -> Result<()> {
        let f = BufWriter::new(File::create(out_dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }

    pub fn load(out_dir: &Path) -> Result<Self> {
        let f = BufReader::new(File::open(out_dir.join("manifest.json"))?);
        Ok(serde_json::from_reader(f)?)
    }
}

/// Dataset layout: `dataset.json` manifest plus one little-endian f64 blob
/// per tuple.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub tuples: usize,
    pub frames_per_tuple: usize,
    pub labels_per_tuple: usize,
    pub image_width: usize,
    pub image_height: usize,
    pub input_channels: usize,
    pub files: Vec<String>,
}

fn tuple_blob(t: &TrainingTuple) -> Vec<f64> {
    let mut blob = Vec::new();
    for f in &t.frames {
        blob.extend_from_slice(&f.input.data);
        blob.extend_from_slice(&f.occ_depth.data);
        blob.extend_from_slice(&[f.rel_pose.px, f.rel_pose.py, f.rel_pose.theta]);
    }
    for d in &t.depth_targets {
        blob.extend_from_slice(&d.data);
    }
    for p in &t.label_poses {
        blob.extend_from_slice(&[p.px, p.py, p.theta]);
    }
    for &(m, n) in &t.label_trav {
        blob.extend_from_slice(&[m, n]);
    }
    blob
}

pub fn save_dataset(dir: &Path, tuples: &[TrainingTuple]) -> Result<DatasetManifest> {
    if tuples.is_empty() {
        return Err(Error::InvalidInput("cannot save empty dataset".into()));
    }
    fs::create_dir_all(dir)?;
    let t0 = &tuples[0];
    let mut files = Vec::with_capacity(tuples.len());
    for (i, t) in tuples.iter().enumerate() {
        if t.frames.len() != t0.frames.len() || t.label_trav.len() != t0.label_trav.len() {
            return Err(Error::InvalidInput("heterogeneous tuple shapes".into()));
        }
        let name = format!("tuple_{i:05}.bin");
        let mut w = BufWriter::new(File::create(dir.join(&name))?);
        for v in tuple_blob(t) {
            w.write_all(&v.to_le_bytes())?;
        }
        files.push(name);
    }
    let manifest = DatasetManifest {
        tuples: tuples.len(),
        frames_per_tuple: t0.frames.len(),
        labels_per_tuple: t0.label_trav.len(),
        image_width: t0.frames[0].input.width,
        image_height: t0.frames[0].input.height,
        input_channels: t0.frames[0].input.channels,
        files,
    };
    let f = BufWriter::new(File::create(dir.join("dataset.json"))?);
    serde_json::to_writer_pretty(f, &manifest)?;
    Ok(manifest)
}

pub fn load_dataset(dir: &Path) -> Result<Vec<TrainingTuple>> {
    let f = BufReader::new(File::open(dir.join("dataset.json"))?);
    let m: DatasetManifest = serde_json::from_reader(f)?;
    let npix = m.image_width * m.image_height;
    let input_len = npix * m.input_channels;
    let mut tuples = Vec::with_capacity(m.tuples);
    for name in &m.files {
        let mut buf = Vec::new();
        BufReader::new(File::open(dir.join(name))?).read_to_end(&mut buf)?;
        if buf.len() % 8 != 0 {
            return Err(Error::InvalidInput(format!("tuple blob {name} not f64-aligned")));
        }
        let vals: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let expect = m.frames_per_tuple * (input_len + npix + 3)
            + m.frames_per_tuple * npix
            + m.labels_per_tuple * 3
            + m.labels_per_tuple * 2;
        if vals.len() != expect {
            return Err(Error::InvalidInput(format!(
                "tuple blob {name}: {} values, expected {expect}",
                vals.len()
            )));
        }
        let mut pos = 0;
        let mut take = |n: usize| {
            let s = vals[pos..pos + n].to_vec();
            pos += n;
            s
        };
        let mut frames = Vec::with_capacity(m.frames_per_tuple);
        for _ in 0..m.frames_per_tuple {
            let input = crate::bev::InputImage {
                width: m.image_width,
                height: m.image_height,
                channels: m.input_channels,
                data: take(input_len),
            };
            let occ_depth =
                DepthImage { width: m.image_width, height: m.image_height, data: take(npix) };
            let pose = take(3);
            frames.push(crate::model::FrameInput {
                input,
                occ_depth,
                rel_pose: State2D::new(pose[0], pose[1], pose[2]),
            });
        }
        let depth_targets: Vec<DepthImage> = (0..m.frames_per_tuple)
            .map(|_| DepthImage { width: m.image_width, height: m.image_height, data: take(npix) })
            .collect();
        let label_poses: Vec<State2D> = (0..m.labels_per_tuple)
            .map(|_| {
                let p = take(3);
                State2D::new(p[0], p[1], p[2])
            })
            .collect();
        let label_trav: Vec<(f64, f64)> = (0..m.labels_per_tuple)
            .map(|_| {
                let l = take(2);
                (l[0], l[1])
            })
            .collect();
        tuples.push(TrainingTuple { frames, depth_targets, label_poses, label_trav });
    }
    Ok(tuples)
}

/// Model shape descriptor persisted next to the flat parameter binary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDescriptor {
    pub config: ModelConfig,
    pub camera: crate::camera::CameraModel,
    pub num_params: usize,
}

pub fn save_model(path: &Path, net: &TravNet) -> Result<()> {
    let desc = ModelDescriptor {
        config: net.cfg.clone(),
        camera: net.camera.clone(),
        num_params: net.num_params(),
    };
    let json_path = path.with_extension("json");
    let f = BufWriter::new(File::create(&json_path)?);
    serde_json::to_writer_pretty(f, &desc)?;
    let mut w = BufWriter::new(File::create(path)?);
    for v in net.params() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TravNet> {
    let json_path = path.with_extension("json");
    let f = BufReader::new(File::open(&json_path)?);
    let desc: ModelDescriptor = serde_json::from_reader(f)?;
    let mut net = TravNet::new(desc.config, desc.camera)?;
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    let params: Vec<f64> =
        buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if params.len() != desc.num_params || params.len() != net.num_params() {
        return Err(Error::InvalidInput(format!(
            "model file holds {} params, descriptor expects {}",
            params.len(),
            desc.num_params
        )));
    }
    net.set_params(&params);
    Ok(net)
}

/// Overview plot: truth traction as grayscale, final predicted map inset to
/// the right, driven path and waypoints overdrawn.
pub fn write_overview_png(
    path: &Path,
    world: &World,
    traj: &Trajectory,
    final_map: Option<(&TraversabilityMap, &State2D)>,
    waypoints: &[(f64, f64)],
) -> Result<()> {
    const SCALE: usize = 6;
    let (nx, ny) = (world.truth_mu.nx, world.truth_mu.ny);
    let map_w = final_map.map_or(0, |(m, _)| m.mu.nx * SCALE + SCALE);
    let w = nx * SCALE + map_w;
    let h = ny * SCALE;
    let mut img = image::RgbImage::from_pixel(w as u32, h as u32, image::Rgb([30, 30, 30]));

    let put = |img: &mut image::RgbImage, x: i64, y: i64, c: [u8; 3]| {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, image::Rgb(c));
        }
    };
    // truth panel: y flipped so +y is up
    for iy in 0..ny {
        for ix in 0..nx {
            let v = (world.truth_mu.data[iy * nx + ix] * 255.0).round() as u8;
            for sy in 0..SCALE {
                for sx in 0..SCALE {
                    put(
                        &mut img,
                        (ix * SCALE + sx) as i64,
                        ((ny - 1 - iy) * SCALE + sy) as i64,
                        [v, v, v],
                    );
                }
            }
        }
    }
    let cell = world.truth_mu.cell;
    let origin = world.truth_mu.origin;
    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let fx = (x - origin.0) / cell * SCALE as f64;
        let fy = h as f64 - (y - origin.1) / cell * SCALE as f64;
        (fx.round() as i64, fy.round() as i64)
    };
    for s in &traj.states {
        let (px, py) = to_px(s.px, s.py);
        put(&mut img, px, py, [220, 60, 60]);
        put(&mut img, px + 1, py, [220, 60, 60]);
        put(&mut img, px, py + 1, [220, 60, 60]);
    }
    for &(wx, wy) in waypoints {
        let (px, py) = to_px(wx, wy);
        for d in -3i64..=3 {
            put(&mut img, px + d, py, [80, 200, 80]);
            put(&mut img, px, py + d, [80, 200, 80]);
        }
    }
    if let Some((map, _pose)) = final_map {
        let x0 = nx * SCALE + SCALE;
        for iy in 0..map.mu.ny {
            for ix in 0..map.mu.nx {
                let v = (map.mu.data[iy * map.mu.nx + ix].clamp(0.0, 1.0) * 255.0).round() as u8;
                for sy in 0..SCALE {
                    for sx in 0..SCALE {
                        put(
                            &mut img,
                            (x0 + ix * SCALE + sx) as i64,
                            ((map.mu.ny - 1 - iy) * SCALE + sy) as i64,
                            [v / 2, v, v / 2],
                        );
                    }
                }
            }
        }
    }
    img.save(path).map_err(|e| Error::InvalidInput(format!("png write failed: {e}")))?;
    Ok(())
}

/// Create `dir` if needed and return it as a PathBuf.
pub fn ensure_dir(dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.to_path_buf())
}
