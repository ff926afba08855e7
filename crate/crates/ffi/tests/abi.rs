use std::ffi::{CStr, CString};
use std::ptr;

use cgmmd::generator::{init_generator, save_checkpoint, GeneratorConfig};
use cgmmd_ffi::*;

fn last_error() -> String {
    let p = cgmmd_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
}

fn sample_checkpoint() -> (cgmmd::generator::GeneratorNet, Vec<u8>) {
    let net = init_generator(&GeneratorConfig::new(1, 2, vec![8], 3)).unwrap();
    let bytes = save_checkpoint(&net);
    (net, bytes)
}

#[test]
fn generator_round_trip_matches_library() {
    let (net, bytes) = sample_checkpoint();
    let mut handle = ptr::null_mut();
    let status = unsafe { cgmmd_generator_load(bytes.as_ptr(), bytes.len(), &mut handle) };
    assert_eq!(status, CgmmdStatus::Ok);
    assert!(cgmmd_last_error_message().is_null());

    let (mut d, mut m, mut p) = (0, 0, 0);
    assert_eq!(unsafe { cgmmd_generator_dims(handle, &mut d, &mut m, &mut p) }, CgmmdStatus::Ok);
    assert_eq!((d, m, p), (1, 3, 2));

    let mut out = vec![0.0; 5 * 2];
    let x = [0.5];
    assert_eq!(unsafe { cgmmd_generator_sample(handle, x.as_ptr(), 5, 11, out.as_mut_ptr()) }, CgmmdStatus::Ok);
    assert_eq!(out, net.sample_at(&x, 5, 11).unwrap().into_data());

    let eta = [0.1, -0.2, 0.3, 1.0, 0.0, -1.0];
    let xs = [0.0, 2.0];
    let mut gen = vec![0.0; 4];
    assert_eq!(
        unsafe { cgmmd_generator_generate(handle, eta.as_ptr(), xs.as_ptr(), 2, gen.as_mut_ptr()) },
        CgmmdStatus::Ok
    );
    let expected = net
        .generate(
            &cgmmd::Matrix::new(2, 3, eta.to_vec()).unwrap(),
            &cgmmd::Matrix::column(&xs),
        )
        .unwrap();
    assert_eq!(gen, expected.into_data());
    unsafe { cgmmd_generator_free(handle) };
    unsafe { cgmmd_generator_free(ptr::null_mut()) };
}

#[test]
fn load_from_path_and_errors() {
    let (_, mut bytes) = sample_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    std::fs::write(&path, &bytes).unwrap();
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { cgmmd_generator_load_path(c.as_ptr(), &mut handle) }, CgmmdStatus::Ok);
    unsafe { cgmmd_generator_free(handle) };

    let missing = CString::new(dir.path().join("none").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { cgmmd_generator_load_path(missing.as_ptr(), &mut handle) }, CgmmdStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("io error"));

    let n = bytes.len();
    bytes[n / 2] ^= 1;
    assert_eq!(
        unsafe { cgmmd_generator_load(bytes.as_ptr(), bytes.len(), &mut handle) },
        CgmmdStatus::Checkpoint
    );
    assert!(last_error().contains("checkpoint"));
    assert_eq!(unsafe { cgmmd_generator_load(ptr::null(), 0, &mut handle) }, CgmmdStatus::NullPointer);
    assert_eq!(unsafe { cgmmd_generator_load(bytes.as_ptr(), 3, ptr::null_mut()) }, CgmmdStatus::NullPointer);
}

#[test]
fn estimate_and_knn_over_raw_arrays() {
    let x = [0.0, 1.0];
    let y = [0.0, 0.0];
    let z = [1.0, 1.0];
    let mut v = f64::NAN;
    let status = unsafe {
        cgmmd_ecmmd_estimate(x.as_ptr(), y.as_ptr(), z.as_ptr(), 2, 1, 1, 1, CgmmdKernel::Gaussian, 1.0, &mut v)
    };
    assert_eq!(status, CgmmdStatus::Ok);
    assert!((v - (2.0 - 2.0 * (-0.5f64).exp())).abs() < 1e-12);

    let status = unsafe {
        cgmmd_ecmmd_estimate(x.as_ptr(), y.as_ptr(), z.as_ptr(), 2, 1, 1, 2, CgmmdKernel::Laplace, 1.0, &mut v)
    };
    assert_eq!(status, CgmmdStatus::InvalidArgument);
    let status = unsafe {
        cgmmd_ecmmd_estimate(x.as_ptr(), y.as_ptr(), z.as_ptr(), 2, 1, 1, 1, CgmmdKernel::Gaussian, -1.0, &mut v)
    };
    assert_eq!(status, CgmmdStatus::InvalidArgument);
    assert!(last_error().contains("bandwidth"));

    let pts = [0.0, 1.0, 3.0, 7.0];
    let mut nb = [usize::MAX; 4];
    assert_eq!(unsafe { cgmmd_knn_build(pts.as_ptr(), 4, 1, 1, nb.as_mut_ptr()) }, CgmmdStatus::Ok);
    assert_eq!(nb, [1, 0, 1, 2]);
    let bad = [0.0, f64::NAN];
    assert_eq!(unsafe { cgmmd_knn_build(bad.as_ptr(), 2, 1, 1, nb.as_mut_ptr()) }, CgmmdStatus::NonFinite);
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(cgmmd_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/cgmmd.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in [
        "cgmmd_generator_load",
        "cgmmd_generator_free",
        "cgmmd_ecmmd_estimate",
        "cgmmd_knn_build",
        "cgmmd_last_error_message",
        "typedef struct CgmmdGenerator CgmmdGenerator",
    ] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(&src, "#include \"cgmmd.h\"\nint main(void) { return cgmmd_version() == 0; }\n").unwrap();
    let include = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    match std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-I", include])
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("no C compiler available, skipping syntax check: {e}"),
    }
}
