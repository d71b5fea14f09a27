use std::path::{Path, PathBuf};

use crackclf::data_io::*;
use crackclf_core::synthetic::{generate, SyntheticConfig};
use crackclf_core::trainer::Sample;
use crackclf_core::{BinaryMask, Tensor};
use image::{GrayImage, Luma, Rgb, RgbImage};
use proptest::prelude::*;

fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
    GrayImage::from_fn(w, h, |x, y| Luma([f(x, y)])).save(path).unwrap();
}

fn manifest_with(dir: &Path, n: usize) -> DatasetManifest {
    let mut m = DatasetManifest::new("t");
    m.base_dir = dir.to_path_buf();
    for i in 0..n {
        let image = PathBuf::from(format!("i{i}.png"));
        let mask = PathBuf::from(format!("m{i}.png"));
        RgbImage::from_pixel(16, 16, Rgb([i as u8, 0, 0]))
            .save(dir.join(&image))
            .unwrap();
        write_gray(&dir.join(&mask), 16, 16, |x, _| if x == i as u32 { 255 } else { 0 });
        m.entries.push(ManifestEntry {
            image,
            mask,
            split: Split::Train,
        });
    }
    m
}

fn sample(c: usize, h: usize, w: usize) -> Sample {
    Sample {
        image: Tensor::from_fn(&[c, h, w], |i| i as f64),
        mask: BinaryMask::from_fn(h, w, |y, x| (y * 7 + x * 3) % 5 == 0),
    }
}

#[test]
fn mask_threshold_boundary() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.png");
    write_gray(&p, 4, 1, |x, _| [127, 128, 0, 255][x as usize]);
    let m = load_mask(&p).unwrap();
    assert_eq!(m.data(), &[false, true, false, true]);
}

#[test]
fn all_black_mask_is_empty() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.png");
    write_gray(&p, 9, 5, |_, _| 0);
    let m = load_mask(&p).unwrap();
    assert_eq!((m.height(), m.width(), m.count()), (5, 9, 0));
}

#[test]
fn synthetic_pair_round_trips_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let s = generate(&SyntheticConfig::default(), 4);
    let (ip, mp) = (dir.path().join("i.png"), dir.path().join("m.png"));
    save_image(&s.image, &ip).unwrap();
    save_mask(&s.mask, &mp).unwrap();
    assert_eq!(load_image(&ip).unwrap(), quantize(&s.image));
    assert_eq!(load_mask(&mp).unwrap(), s.mask);
    // Loading is idempotent once quantized.
    let again = dir.path().join("j.png");
    save_image(&load_image(&ip).unwrap(), &again).unwrap();
    assert_eq!(load_image(&again).unwrap(), load_image(&ip).unwrap());
}

#[test]
fn load_errors_name_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = manifest_with(dir.path(), 1);
    write_gray(&dir.path().join("m0.png"), 8, 16, |_, _| 0);
    let e = load_pair(&m, &m.entries[0]).unwrap_err().to_string();
    assert!(e.contains("m0.png") && e.contains("16x8"), "{e}");
    std::fs::write(dir.path().join("i0.png"), b"garbage").unwrap();
    let e = load_pair(&m, &m.entries[0]).unwrap_err().to_string();
    assert!(e.contains("i0.png"), "{e}");
    m.entries[0].image = "missing.png".into();
    let e = load_pair(&m, &m.entries[0]).unwrap_err().to_string();
    assert!(e.contains("missing.png"), "{e}");
}

#[test]
fn manifest_read_checks_paths_and_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let m = manifest_with(dir.path(), 5);
    let path = dir.path().join("manifest.tsv");
    m.write(&path).unwrap();
    let back = DatasetManifest::read(&path).unwrap();
    assert_eq!(back.entries, m.entries);
    std::fs::remove_file(dir.path().join("m3.png")).unwrap();
    let e = DatasetManifest::read(&path).unwrap_err().to_string();
    assert!(e.contains("m3.png"), "{e}");
}

#[test]
fn load_split_crops_to_the_input_divisor() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = DatasetManifest::new("t");
    m.base_dir = dir.path().to_path_buf();
    RgbImage::new(40, 20).save(dir.path().join("a.png")).unwrap();
    write_gray(&dir.path().join("b.png"), 40, 20, |_, _| 255);
    m.entries.push(ManifestEntry {
        image: "a.png".into(),
        mask: "b.png".into(),
        split: Split::Test,
    });
    let s = load_split(&m, Split::Test).unwrap();
    assert_eq!(s[0].0, "a");
    assert_eq!((s[0].1.mask.height(), s[0].1.mask.width()), (16, 32));
    assert!(load_split(&m, Split::Train).unwrap().is_empty());
}

#[test]
fn tile_arithmetic() {
    let t = tile(&sample(1, 256, 256), 4).unwrap();
    assert_eq!(t.len(), 16);
    assert!(t.iter().all(|s| (s.mask.height(), s.mask.width()) == (64, 64)));
    let big = Sample {
        image: Tensor::zeros(&[1, 2000, 1500]),
        mask: BinaryMask::zeros(2000, 1500),
    };
    let t = tile(&big, 4).unwrap();
    assert_eq!(t.len(), 16);
    assert!(t.iter().all(|s| (s.mask.height(), s.mask.width()) == (500, 375)));
    assert!(tile(&sample(3, 3, 8), 4).is_err());
}

#[test]
fn cfd_preset_and_trivial_fractions() {
    let a = assign_fractions(118, CFD_FRACTIONS, 0).unwrap();
    let count = |s| a.iter().filter(|&&x| x == s).count();
    assert_eq!(
        [count(Split::Train), count(Split::Val), count(Split::Test)],
        [72, 0, 46]
    );
    assert!(assign_fractions(10, [1.0, 0.0, 0.0], 3)
        .unwrap()
        .iter()
        .all(|&s| s == Split::Train));
    assert!(assign_fractions(0, [1.0, 0.0, 0.0], 3).is_err());
    assert!(assign_fractions(10, [0.5, 0.1, 0.1], 3).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiles_partition_the_cropped_image(h in 4usize..40, w in 4usize..40, grid in 1usize..5) {
        let s = sample(2, h, w);
        let tiles = tile(&s, grid).unwrap();
        prop_assert_eq!(tiles.len(), grid * grid);
        let (top, left, ch, cw) = center_crop_box(h, w, grid);
        let (th, tw) = (ch / grid, cw / grid);
        let mut image = Tensor::full(&[2, ch, cw], -1.0);
        let mut mask = BinaryMask::zeros(ch, cw);
        let mut hits = vec![0u32; ch * cw];
        for (k, t) in tiles.iter().enumerate() {
            let (r, c) = (k / grid, k % grid);
            for ch_ in 0..2 {
                for y in 0..th {
                    for x in 0..tw {
                        let v = t.image.data()[(ch_ * th + y) * tw + x];
                        image.data_mut()[(ch_ * ch + r * th + y) * cw + c * tw + x] = v;
                    }
                }
            }
            for y in 0..th {
                for x in 0..tw {
                    mask.set(r * th + y, c * tw + x, t.mask.get(y, x));
                    hits[(r * th + y) * cw + c * tw + x] += 1;
                }
            }
        }
        prop_assert!(hits.iter().all(|&n| n == 1));
        prop_assert_eq!(image, crop_tensor(&s.image, top, left, ch, cw).unwrap());
        prop_assert_eq!(mask, crop_mask(&s.mask, top, left, ch, cw));
    }

    #[test]
    fn manifest_text_is_order_stable(splits in prop::collection::vec(0usize..3, 0..30)) {
        let mut m = DatasetManifest::new("d");
        m.tile_size = Some(64);
        for (i, s) in splits.iter().enumerate() {
            m.entries.push(ManifestEntry {
                image: format!("img/{i}.png").into(),
                mask: format!("gt/{i}.png").into(),
                split: Split::ALL[*s],
            });
        }
        let back = DatasetManifest::parse(&m.to_text()).unwrap();
        prop_assert_eq!(back.entries, m.entries);
        prop_assert_eq!(back.tile_size, Some(64));
        prop_assert_eq!(back.dataset, "d");
    }

    #[test]
    fn splits_are_deterministic_and_sized(n in 1usize..200, a in 0.0f64..1.0, b in 0.0f64..1.0, seed: u64) {
        let (train, val) = (a, (1.0 - a) * b);
        let f = [train, val, 1.0 - train - val];
        let x = assign_fractions(n, f, seed).unwrap();
        prop_assert_eq!(&x, &assign_fractions(n, f, seed).unwrap());
        let counts = counts_from_fractions(n, f).unwrap();
        prop_assert_eq!(counts.iter().sum::<usize>(), n);
        for (k, s) in Split::ALL.iter().enumerate() {
            prop_assert_eq!(x.iter().filter(|&v| v == s).count(), counts[k]);
            prop_assert!((counts[k] as f64 - f[k] * n as f64).abs() <= 1.0 + 1e-9);
        }
    }

    #[test]
    fn binarization_is_idempotent(bits in prop::collection::vec(any::<bool>(), 1..64)) {
        let dir = tempfile::tempdir().unwrap();
        let m = BinaryMask::new(1, bits.len(), bits).unwrap();
        let p = dir.path().join("m.png");
        save_mask(&m, &p).unwrap();
        let once = load_mask(&p).unwrap();
        save_mask(&once, &p).unwrap();
        prop_assert_eq!(&load_mask(&p).unwrap(), &once);
        prop_assert_eq!(once, m);
    }
}
