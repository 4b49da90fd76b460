use super::{DataError, Sample};
use crate::volume::{BinaryMask, ImageVolume, Shape3};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleFormat {
    Hdf5,
    #[serde(rename = "rawjson")]
    RawJson,
}

impl SampleFormat {
    /// `.h5`/`.hdf5` files are HDF5; anything else is a rawjson directory.
    pub fn infer(path: &Path) -> SampleFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("h5" | "hdf5") => SampleFormat::Hdf5,
            _ => SampleFormat::RawJson,
        }
    }
}

impl std::str::FromStr for SampleFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hdf5" => Ok(SampleFormat::Hdf5),
            "rawjson" => Ok(SampleFormat::RawJson),
            other => Err(format!("unknown sample format {other:?} (expected hdf5 or rawjson)")),
        }
    }
}

/// `meta.json` of a rawjson sample directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    pub shape: [usize; 3],
    pub spacing: [f64; 3],
    pub dtype: String,
    pub byte_order: String,
}

const IMAGE: &str = "image";
const LABEL: &str = "label";
const SPACING: &str = "spacing";

fn sample_id(path: &Path) -> String {
    path.file_stem()
        .or_else(|| path.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

pub fn load_sample(path: &Path, format: SampleFormat) -> Result<Sample, DataError> {
    if !path.exists() {
        return Err(DataError::MissingFile(path.to_path_buf()));
    }
    let id = sample_id(path);
    let (shape, spacing, image, label) = match format {
        SampleFormat::Hdf5 => read_hdf5(path)?,
        SampleFormat::RawJson => read_rawjson(path)?,
    };
    let volume = |source| DataError::Volume { id: id.clone(), source };
    let image = ImageVolume::new(shape, image, spacing).map_err(volume)?;
    let label = label.map(|l| BinaryMask::new(shape, l)).transpose().map_err(volume)?;
    Sample::new(id, image, label)
}

pub fn save_sample(sample: &Sample, path: &Path, format: SampleFormat) -> Result<(), DataError> {
    match format {
        SampleFormat::Hdf5 => write_hdf5(sample, path),
        SampleFormat::RawJson => write_rawjson(sample, path),
    }
}

type Loaded = (Shape3, [f64; 3], Vec<f32>, Option<Vec<u8>>);

fn read_hdf5(path: &Path) -> Result<Loaded, DataError> {
    let err = |e: hdf5::Error| DataError::format(path, e);
    let file = hdf5::File::open(path).map_err(err)?;
    let image_ds = file.dataset(IMAGE).map_err(err)?;
    let dims = image_ds.shape();
    let [h, w, d] = dims[..] else {
        return Err(DataError::format(
            path,
            format!("image must be 3-D, found shape {dims:?}"),
        ));
    };
    if image_ds.dtype().map_err(err)?.size() != 4 {
        return Err(DataError::format(path, "image dataset must be float32"));
    }
    let shape = Shape3::new(h, w, d);
    let image = image_ds.read_raw::<f32>().map_err(err)?;
    let spacing_attr = file
        .attr(SPACING)
        .or_else(|_| image_ds.attr(SPACING))
        .map_err(|_| DataError::format(path, "missing spacing attribute"))?;
    let spacing: Vec<f64> = spacing_attr.read_raw().map_err(err)?;
    let spacing: [f64; 3] = spacing
        .try_into()
        .map_err(|v: Vec<f64>| DataError::format(path, format!("spacing must hold 3 values, found {}", v.len())))?;
    let label = if file.link_exists(LABEL) {
        let ds = file.dataset(LABEL).map_err(err)?;
        if ds.shape() != dims {
            return Err(DataError::format(
                path,
                format!("label shape {:?} differs from image shape {dims:?}", ds.shape()),
            ));
        }
        if ds.dtype().map_err(err)?.size() != 1 {
            return Err(DataError::format(path, "label dataset must be uint8"));
        }
        Some(ds.read_raw::<u8>().map_err(err)?)
    } else {
        None
    };
    Ok((shape, spacing, image, label))
}

fn write_hdf5(sample: &Sample, path: &Path) -> Result<(), DataError> {
    let err = |e: hdf5::Error| DataError::format(path, e);
    // no object timestamps, so identical samples give identical files
    let file = hdf5::File::with_options()
        .with_fcpl(|p| p.obj_track_times(false))
        .create(path)
        .map_err(err)?;
    let s = sample.image.shape();
    let dims = (s.h, s.w, s.d);
    let image = file.new_dataset::<f32>().shape(dims).create(IMAGE).map_err(err)?;
    image.write_raw(sample.image.as_slice()).map_err(err)?;
    if let Some(label) = &sample.label {
        let ds = file.new_dataset::<u8>().shape(dims).create(LABEL).map_err(err)?;
        ds.write_raw(label.as_slice()).map_err(err)?;
    }
    let attr = file.new_attr::<f64>().shape(3).create(SPACING).map_err(err)?;
    attr.write_raw(&sample.image.spacing().0).map_err(err)?;
    Ok(())
}

fn read_rawjson(dir: &Path) -> Result<Loaded, DataError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(|e| DataError::io(&meta_path, e))?;
    let meta: SampleMeta = serde_json::from_str(&text).map_err(|e| DataError::format(&meta_path, e))?;
    if meta.dtype != "float32" {
        return Err(DataError::format(
            &meta_path,
            format!("unsupported dtype {:?}", meta.dtype),
        ));
    }
    if meta.byte_order != "little" {
        return Err(DataError::format(
            &meta_path,
            format!("unsupported byte order {:?}", meta.byte_order),
        ));
    }
    let shape = Shape3::from_dims(meta.shape);
    let image_path = dir.join("image.raw");
    let bytes = fs::read(&image_path).map_err(|e| DataError::io(&image_path, e))?;
    if bytes.len() != shape.len() * 4 {
        return Err(DataError::format(
            &image_path,
            format!(
                "expected {} bytes for shape {shape}, found {}",
                shape.len() * 4,
                bytes.len()
            ),
        ));
    }
    let image = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let label_path = dir.join("label.raw");
    let label = if label_path.exists() {
        let bytes = fs::read(&label_path).map_err(|e| DataError::io(&label_path, e))?;
        if bytes.len() != shape.len() {
            return Err(DataError::format(
                &label_path,
                format!(
                    "expected {} bytes for shape {shape}, found {}",
                    shape.len(),
                    bytes.len()
                ),
            ));
        }
        Some(bytes)
    } else {
        None
    };
    Ok((shape, meta.spacing, image, label))
}

fn write_rawjson(sample: &Sample, dir: &Path) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| DataError::io(dir, e))?;
    let meta = SampleMeta {
        shape: sample.image.shape().dims(),
        spacing: sample.image.spacing().0,
        dtype: "float32".into(),
        byte_order: "little".into(),
    };
    let meta_path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).expect("meta serialises");
    fs::write(&meta_path, text + "\n").map_err(|e| DataError::io(&meta_path, e))?;
    let image_path = dir.join("image.raw");
    let bytes: Vec<u8> = sample.image.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&image_path, bytes).map_err(|e| DataError::io(&image_path, e))?;
    if let Some(label) = &sample.label {
        let label_path = dir.join("label.raw");
        fs::write(&label_path, label.as_slice()).map_err(|e| DataError::io(&label_path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeError;

    fn sample() -> Sample {
        let s = Shape3::new(3, 4, 5);
        let image = ImageVolume::new(
            s,
            (0..s.len()).map(|i| i as f32 * 0.25 - 3.0).collect(),
            [0.625, 0.625, 1.25],
        )
        .unwrap();
        let label = BinaryMask::from_fn(s, |i, j, _| i == 1 && j > 1);
        Sample::new("case", image, Some(label)).unwrap()
    }

    #[test]
    fn hdf5_and_rawjson_round_trip_to_the_same_sample() {
        let dir = tempfile::tempdir().unwrap();
        let original = sample();
        let h5 = dir.path().join("case.h5");
        let raw = dir.path().join("case");
        save_sample(&original, &h5, SampleFormat::Hdf5).unwrap();
        save_sample(&original, &raw, SampleFormat::RawJson).unwrap();
        let from_h5 = load_sample(&h5, SampleFormat::infer(&h5)).unwrap();
        let from_raw = load_sample(&raw, SampleFormat::infer(&raw)).unwrap();
        assert_eq!(from_h5, original);
        assert_eq!(from_raw, original);
    }

    #[test]
    fn rewriting_a_sample_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.h5"), dir.path().join("b.h5"));
        save_sample(&sample(), &a, SampleFormat::Hdf5).unwrap();
        std::thread::sleep(std::time::Duration::from_millis(1100));
        save_sample(&sample(), &b, SampleFormat::Hdf5).unwrap();
        assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
    }

    #[test]
    fn unlabeled_samples_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = sample();
        s.label = None;
        for (path, fmt) in [
            (dir.path().join("u.h5"), SampleFormat::Hdf5),
            (dir.path().join("u"), SampleFormat::RawJson),
        ] {
            save_sample(&s, &path, fmt).unwrap();
            assert_eq!(load_sample(&path, fmt).unwrap().label, None);
        }
    }

    #[test]
    fn non_binary_label_is_a_dtype_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.h5");
        save_sample(&sample(), &path, SampleFormat::Hdf5).unwrap();
        {
            let file = hdf5::File::open_rw(&path).unwrap();
            let ds = file.dataset("label").unwrap();
            let mut data: Vec<u8> = ds.read_raw().unwrap();
            data[7] = 3;
            ds.write_raw(&data).unwrap();
        }
        let err = load_sample(&path, SampleFormat::Hdf5).unwrap_err();
        assert!(matches!(
            err,
            DataError::Volume {
                source: VolumeError::NonBinaryLabel { value: 3, index: 7, .. },
                ..
            }
        ));
    }

    #[test]
    fn rawjson_rejects_bad_metadata_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s");
        save_sample(&sample(), &path, SampleFormat::RawJson).unwrap();
        fs::write(path.join("image.raw"), [0u8; 10]).unwrap();
        assert!(matches!(
            load_sample(&path, SampleFormat::RawJson),
            Err(DataError::Format { .. })
        ));
        let meta = r#"{"shape":[3,4,5],"spacing":[1,1,1],"dtype":"float64","byte_order":"little"}"#;
        fs::write(path.join("meta.json"), meta).unwrap();
        let err = load_sample(&path, SampleFormat::RawJson).unwrap_err();
        assert!(err.to_string().contains("float64"));
    }

    #[test]
    fn missing_file_is_reported() {
        let err = load_sample(Path::new("/nonexistent/x.h5"), SampleFormat::Hdf5).unwrap_err();
        assert!(matches!(err, DataError::MissingFile(_)));
    }

    #[test]
    fn format_names_parse() {
        assert_eq!("hdf5".parse::<SampleFormat>().unwrap(), SampleFormat::Hdf5);
        assert_eq!("rawjson".parse::<SampleFormat>().unwrap(), SampleFormat::RawJson);
        assert!("nifti".parse::<SampleFormat>().is_err());
    }
}
