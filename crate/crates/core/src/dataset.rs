//! On-disk frames and annotations.
//!
//! A dataset directory holds `intrinsics.txt` plus, per frame `NAME`,
//! `NAME_color.png` (8-bit RGB), `NAME_depth.png` (16-bit gray, millimeters,
//! 0 = invalid) and optionally `NAME_gt.txt` with one instance per line:
//! `object_id qw qx qy qz tx ty tz` (translation in meters, object to
//! camera). Intrinsics are `key = value` lines for `fx`, `fy`, `cx`, `cy`,
//! `width` and `height`. Lines starting with `#` are comments in both text
//! formats.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::frame::RgbdFrame;
use crate::geom::{quat_from_wxyz, quat_to_wxyz, CameraIntrinsics, Pose};
use crate::metrics::Instance;

pub const INTRINSICS_FILE: &str = "intrinsics.txt";

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn parse_err(context: &str, message: impl Into<String>) -> Error {
    Error::Parse {
        context: context.into(),
        message: message.into(),
    }
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

pub fn format_intrinsics(k: &CameraIntrinsics) -> String {
    format!(
        "fx = {}\nfy = {}\ncx = {}\ncy = {}\nwidth = {}\nheight = {}\n",
        k.fx, k.fy, k.cx, k.cy, k.width, k.height
    )
}

pub fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics> {
    let mut vals: [Option<f64>; 6] = [None; 6];
    const KEYS: [&str; 6] = ["fx", "fy", "cx", "cy", "width", "height"];
    for (n, line) in content_lines(text) {
        let ctx = format!("intrinsics line {n}");
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(&ctx, "expected key = value"))?;
        let key = key.trim();
        let slot = KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| parse_err(&ctx, format!("unknown key {key:?}")))?;
        let v: f64 = value
            .trim()
            .parse()
            .map_err(|_| parse_err(&ctx, format!("bad number {:?}", value.trim())))?;
        vals[slot] = Some(v);
    }
    let get =
        |i: usize| vals[i].ok_or_else(|| parse_err("intrinsics", format!("missing {}", KEYS[i])));
    let (w, h) = (get(4)?, get(5)?);
    if w.fract() != 0.0 || h.fract() != 0.0 || w < 1.0 || h < 1.0 {
        return Err(parse_err(
            "intrinsics",
            "width and height must be positive integers",
        ));
    }
    CameraIntrinsics::new(get(0)?, get(1)?, get(2)?, get(3)?, w as usize, h as usize)
}

pub fn format_gt(instances: &[Instance]) -> String {
    let mut out = String::new();
    for i in instances {
        let [w, x, y, z] = quat_to_wxyz(i.pose.rotation());
        let t = i.pose.translation;
        writeln!(
            out,
            "{} {w} {x} {y} {z} {} {} {}",
            i.object_id, t.x, t.y, t.z
        )
        .unwrap();
    }
    out
}

pub fn parse_gt(text: &str) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (n, line) in content_lines(text) {
        let ctx = format!("ground truth line {n}");
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(parse_err(
                &ctx,
                format!("expected 8 fields, found {}", fields.len()),
            ));
        }
        let object_id: u32 = fields[0]
            .parse()
            .map_err(|_| parse_err(&ctx, "bad object id"))?;
        let mut v = [0.0; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| parse_err(&ctx, format!("bad number {f:?}")))?;
        }
        let qn = v[..4].iter().map(|x| x * x).sum::<f64>().sqrt();
        if !v.iter().all(|x| x.is_finite()) || (qn - 1.0).abs() > 1e-3 {
            return Err(parse_err(
                &ctx,
                "pose must be finite with a unit quaternion",
            ));
        }
        out.push(Instance {
            object_id,
            pose: Pose::new(
                quat_from_wxyz(v[0], v[1], v[2], v[3]),
                Vector3::new(v[4], v[5], v[6]),
            ),
        });
    }
    Ok(out)
}

pub fn save_color_png(frame: &RgbdFrame, path: &Path) -> Result<()> {
    let mut img = image::RgbImage::new(frame.width() as u32, frame.height() as u32);
    for (px, c) in img.pixels_mut().zip(&frame.color) {
        px.0 = *c;
    }
    img.save(path).map_err(|e| image_err(path, e))
}

/// Depth in whole millimeters; values beyond the 16-bit range are stored as
/// invalid.
pub fn save_depth_png(frame: &RgbdFrame, path: &Path) -> Result<()> {
    let mut img = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(
        frame.width() as u32,
        frame.height() as u32,
    );
    for (px, &d) in img.pixels_mut().zip(&frame.depth) {
        let mm = (d * 1000.0).round();
        px.0 = [if d > 0.0 && mm <= u16::MAX as f64 {
            mm as u16
        } else {
            0
        }];
    }
    img.save(path).map_err(|e| image_err(path, e))
}

/// Color and depth PNGs plus intrinsics into one frame.
pub fn load_frame(color: &Path, depth: &Path, k: &CameraIntrinsics) -> Result<RgbdFrame> {
    let c = image::open(color)
        .map_err(|e| image_err(color, e))?
        .into_rgb8();
    let d = image::open(depth).map_err(|e| image_err(depth, e))?;
    let d = match d {
        image::DynamicImage::ImageLuma16(d) => d,
        other => {
            return Err(image_err(
                depth,
                format!("depth must be 16-bit grayscale, found {:?}", other.color()),
            ))
        }
    };
    for (path, (w, h)) in [(color, c.dimensions()), (depth, d.dimensions())] {
        if (w as usize, h as usize) != (k.width, k.height) {
            return Err(image_err(
                path,
                format!(
                    "image is {w}x{h} but intrinsics say {}x{}",
                    k.width, k.height
                ),
            ));
        }
    }
    let mut frame = RgbdFrame::new(*k);
    for (dst, px) in frame.color.iter_mut().zip(c.pixels()) {
        *dst = px.0;
    }
    for (dst, px) in frame.depth.iter_mut().zip(d.pixels()) {
        *dst = px.0[0] as f64 / 1000.0;
    }
    Ok(frame)
}

/// A directory of frames sharing one set of intrinsics.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub intrinsics: CameraIntrinsics,
    /// Frame names, sorted.
    pub frames: Vec<String>,
}

impl Dataset {
    /// Creates the directory if needed and writes the intrinsics.
    pub fn create(dir: impl AsRef<Path>, k: &CameraIntrinsics) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let p = dir.join(INTRINSICS_FILE);
        std::fs::write(&p, format_intrinsics(k)).map_err(|e| Error::io(&p, e))?;
        Ok(Self {
            dir,
            intrinsics: *k,
            frames: Vec::new(),
        })
    }

    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let p = dir.join(INTRINSICS_FILE);
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let intrinsics = parse_intrinsics(&text)?;
        let mut frames = Vec::new();
        for entry in std::fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            if let Some(name) = entry
                .file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_depth.png"))
            {
                frames.push(name.to_string());
            }
        }
        frames.sort();
        Ok(Self {
            dir,
            intrinsics,
            frames,
        })
    }

    fn path(&self, name: &str, suffix: &str) -> PathBuf {
        self.dir.join(format!("{name}{suffix}"))
    }

    pub fn load(&self, name: &str) -> Result<RgbdFrame> {
        load_frame(
            &self.path(name, "_color.png"),
            &self.path(name, "_depth.png"),
            &self.intrinsics,
        )
    }

    /// Ground truth of a frame; `None` when the frame has no annotation file.
    pub fn ground_truth(&self, name: &str) -> Result<Option<Vec<Instance>>> {
        let p = self.path(name, "_gt.txt");
        match std::fs::read_to_string(&p) {
            Ok(t) => parse_gt(&t).map(Some),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&p, e)),
        }
    }

    pub fn write(&mut self, name: &str, frame: &RgbdFrame, gt: Option<&[Instance]>) -> Result<()> {
        if frame.intrinsics != self.intrinsics {
            return Err(Error::Config(format!(
                "frame {name} has different intrinsics than the dataset"
            )));
        }
        save_color_png(frame, &self.path(name, "_color.png"))?;
        save_depth_png(frame, &self.path(name, "_depth.png"))?;
        if let Some(gt) = gt {
            let p = self.path(name, "_gt.txt");
            std::fs::write(&p, format_gt(gt)).map_err(|e| Error::io(&p, e))?;
        }
        if let Err(i) = self.frames.binary_search_by(|f| f.as_str().cmp(name)) {
            self.frames.insert(i, name.to_string());
        }
        Ok(())
    }
}
