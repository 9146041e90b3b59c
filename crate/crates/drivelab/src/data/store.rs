//! Dataset disk format.
//!
//! `manifest.json` at the root, then `ep_NNNN/` directories each holding
//! `frame_NNNNN.png` and one `data.bin` with this layout (all integers and
//! floats little-endian):
//!
//! ```text
//! magic "DLEP0001"
//! u32 frame_count, u8 annotated, u8 whitebox
//! speed:   f32 x N
//! command: u8  x N
//! control: f32 x 3N           (brake, gas, steer)
//! [annotated] intentions: f32 x 3N
//! [annotated] seg labels: u8  x (88*200)N
//! [whitebox]  whitebox controls: f32 x 12N   (4 commands x 3)
//! ```

use super::{DataError, Dataset, DatasetManifest, Episode, EpisodeMeta, FrameRecord};
use crate::sim::render::{ObsImage, IMG_H, IMG_W};
use crate::sim::Command;
use std::io::{Read, Write};
use std::path::Path;

const EP_MAGIC: &[u8; 8] = b"DLEP0001";

pub fn encode_png(img: &ObsImage) -> Result<Vec<u8>, DataError> {
    let buf = image::RgbImage::from_raw(IMG_W as u32, IMG_H as u32, img.data.clone())
        .expect("image buffer size");
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png)?;
    Ok(out.into_inner())
}

pub fn decode_png(png: &[u8]) -> Result<Vec<u8>, DataError> {
    let img = image::load_from_memory_with_format(png, image::ImageFormat::Png)?;
    Ok(img.into_rgb8().into_raw())
}

fn write_f32s(w: &mut impl Write, vals: impl Iterator<Item = f32>) -> std::io::Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    std::fs::create_dir_all(dir)?;
    let manifest_json = serde_json::to_string_pretty(&ds.manifest)?;
    std::fs::write(dir.join("manifest.json"), manifest_json)?;
    for ep in &ds.episodes {
        let ep_dir = dir.join(format!("ep_{:04}", ep.meta.id));
        std::fs::create_dir_all(&ep_dir)?;
        let n = ep.frames.len();
        debug_assert_eq!(n, ep.meta.frame_count);
        for (fi, f) in ep.frames.iter().enumerate() {
            std::fs::write(ep_dir.join(format!("frame_{fi:05}.png")), f.png_bytes())?;
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(ep_dir.join("data.bin"))?);
        w.write_all(EP_MAGIC)?;
        w.write_all(&(n as u32).to_le_bytes())?;
        let annotated = ep.meta.annotated;
        let whitebox = ep.frames.iter().all(|f| f.whitebox.is_some()) && n > 0;
        w.write_all(&[annotated as u8, whitebox as u8])?;
        write_f32s(&mut w, ep.frames.iter().map(|f| f.speed))?;
        let cmds: Vec<u8> = ep.frames.iter().map(|f| f.command.index() as u8).collect();
        w.write_all(&cmds)?;
        write_f32s(&mut w, ep.frames.iter().flat_map(|f| f.control.into_iter()))?;
        if annotated {
            write_f32s(&mut w, ep.frames.iter().flat_map(|f| f.intentions.unwrap().into_iter()))?;
            for f in &ep.frames {
                w.write_all(f.seg.as_ref().expect("annotated episode has seg"))?;
            }
        }
        if whitebox {
            write_f32s(
                &mut w,
                ep.frames.iter().flat_map(|f| f.whitebox.unwrap().into_iter().flatten()),
            )?;
        }
    }
    Ok(())
}

fn read_exact_vec(r: &mut impl Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_f32s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f32>> {
    let raw = read_exact_vec(r, n * 4)?;
    Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest: DatasetManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for meta in &manifest.episodes {
        episodes.push(load_episode(dir, meta)?);
    }
    Ok(Dataset { manifest, episodes })
}

fn load_episode(dir: &Path, meta: &EpisodeMeta) -> Result<Episode, DataError> {
    let ep_dir = dir.join(format!("ep_{:04}", meta.id));
    let mut r = std::io::BufReader::new(std::fs::File::open(ep_dir.join("data.bin"))?);
    let magic = read_exact_vec(&mut r, 8)?;
    if magic != EP_MAGIC {
        return Err(DataError::Invalid(format!("bad episode magic in {}", ep_dir.display())));
    }
    let n = u32::from_le_bytes(read_exact_vec(&mut r, 4)?.try_into().unwrap()) as usize;
    if n != meta.frame_count {
        return Err(DataError::Invalid(format!(
            "episode {}: manifest says {} frames, file has {}",
            meta.id, meta.frame_count, n
        )));
    }
    let flags = read_exact_vec(&mut r, 2)?;
    let (annotated, whitebox) = (flags[0] != 0, flags[1] != 0);
    if annotated != meta.annotated {
        return Err(DataError::Invalid(format!("episode {}: annotated flag mismatch", meta.id)));
    }
    let speeds = read_f32s(&mut r, n)?;
    let cmds = read_exact_vec(&mut r, n)?;
    let controls = read_f32s(&mut r, 3 * n)?;
    let intentions = if annotated { Some(read_f32s(&mut r, 3 * n)?) } else { None };
    let segs = if annotated { Some(read_exact_vec(&mut r, IMG_H * IMG_W * n)?) } else { None };
    let wb = if whitebox { Some(read_f32s(&mut r, 12 * n)?) } else { None };

    let mut frames = Vec::with_capacity(n);
    for fi in 0..n {
        let png = std::fs::read(ep_dir.join(format!("frame_{fi:05}.png")))?;
        let command = Command::from_index(cmds[fi] as usize)
            .ok_or_else(|| DataError::Invalid(format!("bad command id {}", cmds[fi])))?;
        let control = [controls[3 * fi], controls[3 * fi + 1], controls[3 * fi + 2]];
        let seg = segs.as_ref().map(|s| s[fi * IMG_H * IMG_W..(fi + 1) * IMG_H * IMG_W].to_vec());
        let ints = intentions.as_ref().map(|v| [v[3 * fi], v[3 * fi + 1], v[3 * fi + 2]]);
        let whitebox = wb.as_ref().map(|v| {
            let mut out = [[0f32; 3]; 4];
            for c in 0..4 {
                for k in 0..3 {
                    out[c][k] = v[12 * fi + 3 * c + k];
                }
            }
            out
        });
        frames.push(FrameRecord::from_parts(png, speeds[fi], command, control, seg, ints, whitebox));
    }
    Ok(Episode { meta: meta.clone(), frames })
}
