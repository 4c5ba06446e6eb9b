//! Rendered dataset and its on-disk form.
//!
//! A dataset directory holds `world.json` (spec, signatures, identities,
//! styles, camera offsets as decimal text) and `samples.bin` (header record
//! followed by per-sample metadata and little-endian f32 tokens).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{RealArray, StreamRng};
use crate::synthworld::{render_image, ImageSample, World};

const SAMPLES_MAGIC: u32 = 0x41504353; // "APCS"
const SAMPLES_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Render `images_per_identity_per_domain` images for every identity in
/// every domain, cameras assigned round-robin over a shuffled order.
pub fn render_dataset(world: &World, images_per_identity_per_domain: usize) -> Result<Dataset> {
    if images_per_identity_per_domain == 0 {
        return Err(Error::Validation {
            field: "images_per_identity_per_domain".into(),
            message: "must be >= 1".into(),
        });
    }
    let spec = &world.spec;
    let mut samples = Vec::with_capacity(
        spec.num_identities * spec.num_domains * images_per_identity_per_domain,
    );
    let base = StreamRng::new(spec.seed, "render");
    for id in 0..spec.num_identities {
        for domain in 0..spec.num_domains {
            let mut rng = base.child("image", (id * spec.num_domains + domain) as u64);
            let mut cams: Vec<usize> = (0..images_per_identity_per_domain)
                .map(|k| k % spec.num_cameras)
                .collect();
            rng.shuffle(&mut cams);
            for &camera in &cams {
                samples.push(render_image(world, id, camera, domain, &mut rng)?);
            }
        }
    }
    Ok(Dataset { samples })
}

pub fn write_dataset(dir: &Path, world: &World, dataset: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let world_json = serde_json::to_string_pretty(world)?;
    fs::write(dir.join("world.json"), world_json)?;

    let n = world.spec.tokens_per_image as u32;
    let d = world.spec.input_dim as u32;
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&SAMPLES_MAGIC.to_le_bytes());
    buf.extend_from_slice(&SAMPLES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.samples.len() as u32).to_le_bytes());
    buf.extend_from_slice(&n.to_le_bytes());
    buf.extend_from_slice(&d.to_le_bytes());
    for s in &dataset.samples {
        buf.extend_from_slice(&(s.identity as u32).to_le_bytes());
        buf.extend_from_slice(&(s.camera as u32).to_le_bytes());
        buf.extend_from_slice(&(s.domain as u32).to_le_bytes());
        for &v in s.tokens.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join("samples.bin"))?;
    f.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    off: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.off + n > self.bytes.len() {
            return Err(Error::Data(format!("samples.bin truncated reading {what}")));
        }
        let s = &self.bytes[self.off..self.off + n];
        self.off += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn read_dataset(dir: &Path) -> Result<(World, Dataset)> {
    let world: World = serde_json::from_str(&fs::read_to_string(dir.join("world.json"))?)?;
    let mut bytes = Vec::new();
    fs::File::open(dir.join("samples.bin"))?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, off: 0 };
    if cur.u32("magic")? != SAMPLES_MAGIC {
        return Err(Error::Data("samples.bin: bad magic".into()));
    }
    if cur.u32("version")? != SAMPLES_VERSION {
        return Err(Error::Data("samples.bin: unsupported version".into()));
    }
    let count = cur.u32("count")? as usize;
    let n = cur.u32("tokens")? as usize;
    let d = cur.u32("dim")? as usize;
    if n != world.spec.tokens_per_image || d != world.spec.input_dim {
        return Err(Error::Data(format!(
            "samples.bin dims {n}x{d} disagree with world spec {}x{}",
            world.spec.tokens_per_image, world.spec.input_dim
        )));
    }
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let identity = cur.u32("identity")? as usize;
        let camera = cur.u32("camera")? as usize;
        let domain = cur.u32("domain")? as usize;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(cur.f32("tokens")? as f64);
        }
        samples.push(ImageSample {
            tokens: RealArray::new(vec![n, d], data)?,
            identity,
            camera,
            domain,
        });
    }
    if cur.off != bytes.len() {
        return Err(Error::Data("samples.bin has trailing bytes".into()));
    }
    Ok((world, Dataset { samples }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, WorldSpec};

    #[test]
    fn dataset_round_trips_bit_exactly() {
        let spec = WorldSpec {
            num_identities: 6,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec).unwrap();
        let data = render_dataset(&world, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &world, &data).unwrap();
        let first_world = std::fs::read(dir.path().join("world.json")).unwrap();
        let first_samples = std::fs::read(dir.path().join("samples.bin")).unwrap();

        let (world2, data2) = read_dataset(dir.path()).unwrap();
        assert_eq!(world, world2);
        assert_eq!(data.samples.len(), data2.samples.len());
        for (a, b) in data.samples.iter().zip(&data2.samples) {
            assert_eq!(a, b); // bitwise: tokens were snapped to f32 at render
        }

        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &world2, &data2).unwrap();
        assert_eq!(first_world, std::fs::read(dir2.path().join("world.json")).unwrap());
        assert_eq!(first_samples, std::fs::read(dir2.path().join("samples.bin")).unwrap());
    }

    #[test]
    fn render_dataset_counts() {
        let spec = WorldSpec {
            num_identities: 5,
            num_domains: 2,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec).unwrap();
        let data = render_dataset(&world, 3).unwrap();
        assert_eq!(data.len(), 5 * 2 * 3);
    }
}
