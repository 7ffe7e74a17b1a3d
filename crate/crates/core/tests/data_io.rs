//! Dataset layout on disk, pixmap decoding and windowing.

use std::fs;

use precoder::data::ppm::{decode_ppm, encode_ppm, quantize};
use precoder::data::{
    generate_synthetic, load_frames, save_dataset, slice_sequences, FrameDims, Recording, SequenceDataset,
    SyntheticSpec,
};
use precoder::{Error, Tensor};
use proptest::prelude::*;

fn quantized(ds: &SequenceDataset) -> Vec<Vec<Vec<u8>>> {
    ds.recordings
        .iter()
        .map(|r| r.frames.iter().map(|f| f.data().iter().map(|&v| quantize(v)).collect()).collect())
        .collect()
}

#[test]
fn save_and_load_round_trip() {
    let spec = SyntheticSpec {
        height: 16,
        width: 24,
        background: 0.3,
        seed: 9,
        ..Default::default()
    };
    let ds = generate_synthetic(&spec, 3, 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dataset(&ds, dir.path()).unwrap();
    let back = load_frames(dir.path()).unwrap();
    assert_eq!(back.dims, ds.dims);
    assert_eq!(
        back.recordings.iter().map(|r| (&r.name, r.frames.len())).collect::<Vec<_>>(),
        ds.recordings.iter().map(|r| (&r.name, r.frames.len())).collect::<Vec<_>>()
    );
    // Pixels survive up to 8-bit quantisation, and a second trip is exact.
    assert_eq!(quantized(&back), quantized(&ds));
    let dir2 = tempfile::tempdir().unwrap();
    save_dataset(&back, dir2.path()).unwrap();
    assert_eq!(load_frames(dir2.path()).unwrap(), back);
}

#[test]
fn synthetic_generation_is_seed_deterministic() {
    let spec = SyntheticSpec::default();
    let a = generate_synthetic(&spec, 2, 5).unwrap();
    assert_eq!(a, generate_synthetic(&spec, 2, 5).unwrap());
    assert_ne!(a, generate_synthetic(&SyntheticSpec { seed: 1, ..spec }, 2, 5).unwrap());
}

#[test]
fn synthetic_rejects_bad_specs() {
    let ok = SyntheticSpec::default();
    for bad in [
        SyntheticSpec { height: 30, ..ok.clone() },
        SyntheticSpec { background: 1.5, ..ok.clone() },
        SyntheticSpec { color_range: (0.8, 0.2), ..ok.clone() },
        SyntheticSpec { size_range: (40, 50), ..ok.clone() },
    ] {
        assert!(generate_synthetic(&bad, 1, 3).is_err(), "{bad:?}");
    }
}

#[test]
fn two_frame_recording_gives_one_pair() {
    let dims = FrameDims {
        channels: 3,
        height: 4,
        width: 4,
    };
    let rec = Recording {
        name: "pair".into(),
        frames: vec![Tensor::full(&[3, 4, 4], 0.2), Tensor::full(&[3, 4, 4], 0.4)],
    };
    let ds = SequenceDataset::new(dims, None, vec![rec]).unwrap();
    let w = slice_sequences(&ds, 2, 1).unwrap();
    assert_eq!(w.len(), 1);
    assert!(slice_sequences(&ds, 3, 1).unwrap().is_empty());
    assert_eq!(slice_sequences(&ds, 3, 1).unwrap().skipped_recordings, 1);
}

#[test]
fn inconsistent_frame_sizes_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    for (rec, (h, w)) in [("a", (4, 4)), ("b", (4, 6))] {
        let d = dir.path().join(rec);
        fs::create_dir_all(&d).unwrap();
        let bytes = encode_ppm(&Tensor::full(&[3, h, w], 0.5)).unwrap();
        fs::write(d.join("frame_000000.ppm"), bytes).unwrap();
    }
    assert!(matches!(load_frames(dir.path()), Err(Error::Dataset(_))));

    let dims = FrameDims {
        channels: 3,
        height: 4,
        width: 4,
    };
    let rec = Recording {
        name: "x".into(),
        frames: vec![Tensor::full(&[3, 4, 5], 0.5)],
    };
    assert!(SequenceDataset::new(dims, None, vec![rec]).is_err());
}

#[test]
fn malformed_pixmaps_report_offsets() {
    let path = std::path::Path::new("bad.ppm");
    for bytes in [
        &b"P5\n2 2\n255\n0000"[..],
        &b"P6\n2 2\n65535\n"[..],
        &b"P6\n2 2\n255\n012"[..],
        &b"P6\n2 \n"[..],
    ] {
        assert!(matches!(decode_ppm(bytes, path), Err(Error::Pixmap { .. })));
    }
    let ok = decode_ppm(b"P6 # comment\n1 1\n255\n\xff\x00\x80", path).unwrap();
    assert_eq!(ok.shape(), &[3, 1, 1]);
    assert_eq!(ok.data()[0], 1.0);
    assert_eq!(ok.data()[1], 0.0);
}

#[test]
fn missing_root_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_frames(&dir.path().join("nope")), Err(Error::Io { .. })));
}

proptest! {
    #[test]
    fn window_count_matches_brute_force(
        lengths in prop::collection::vec(0usize..30, 1..6),
        len in 1usize..12,
        stride in 1usize..12,
    ) {
        let dims = FrameDims { channels: 1, height: 1, width: 1 };
        let recordings = lengths
            .iter()
            .enumerate()
            .map(|(i, &n)| Recording { name: format!("r{i}"), frames: vec![Tensor::zeros(&[1, 1, 1]); n] })
            .collect();
        let ds = SequenceDataset::new(dims, None, recordings).unwrap();
        let w = slice_sequences(&ds, len, stride).unwrap();
        let mut expected = Vec::new();
        for (r, &n) in lengths.iter().enumerate() {
            let mut start = 0;
            while start + len <= n {
                expected.push((r, start));
                start += stride;
            }
        }
        prop_assert_eq!(w.windows.iter().map(|w| (w.recording, w.start)).collect::<Vec<_>>(), expected);
        prop_assert_eq!(w.skipped_recordings, lengths.iter().filter(|&&n| n < len).count());
    }
}
