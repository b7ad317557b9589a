use std::ffi::{c_char, CStr, CString};
use std::process::Command;
use std::ptr;

use splinevine_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 512];
    unsafe {
        sv_last_error(buf.as_mut_ptr(), buf.len());
        CStr::from_ptr(buf.as_ptr()).to_string_lossy().into_owned()
    }
}

fn simulate(n: usize) -> Vec<f64> {
    let spec = CString::new("frank:p=3,case=b,beta=0.6").unwrap();
    let mut data = vec![0.0; n * 3];
    let st = unsafe { sv_simulate(spec.as_ptr(), n, 3, 11, 0, data.as_mut_ptr()) };
    assert_eq!(st, SvStatus::Ok, "{}", last_error());
    data
}

#[test]
fn fit_save_load_evaluate() {
    let n = 400;
    let data = simulate(n);
    let mut vine = ptr::null_mut();
    let st = unsafe { sv_vine_fit(data.as_ptr(), n, 3, SV_MODE_TEST, 2, 4, 4, 0.05, &mut vine) };
    assert_eq!(st, SvStatus::Ok, "{}", last_error());
    let mut dim = 0;
    assert_eq!(unsafe { sv_vine_dim(vine, &mut dim) }, SvStatus::Ok);
    assert_eq!(dim, 3);

    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("m.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { sv_vine_save(vine, path.as_ptr()) }, SvStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { sv_vine_load(path.as_ptr(), &mut loaded) }, SvStatus::Ok);

    let pts = [0.2, 0.5, 0.7, 0.9, 0.1, 0.4];
    let mut a = [0.0; 2];
    let mut b = [0.0; 2];
    unsafe {
        assert_eq!(sv_vine_log_density(vine, pts.as_ptr(), 2, 3, a.as_mut_ptr()), SvStatus::Ok);
        assert_eq!(sv_vine_log_density(loaded, pts.as_ptr(), 2, 3, b.as_mut_ptr()), SvStatus::Ok);
    }
    assert_eq!(a, b);
    assert!(a.iter().all(|x| x.is_finite()));
    unsafe {
        sv_vine_free(vine);
        sv_vine_free(loaded);
        sv_vine_free(ptr::null_mut());
    }
}

#[test]
fn errors_are_reported() {
    let mut vine = ptr::null_mut();
    let bad = [0.5, 1.5, 0.2, 0.3];
    let st = unsafe { sv_vine_fit(bad.as_ptr(), 2, 2, SV_MODE_SIMPA, 2, 4, 4, 0.05, &mut vine) };
    assert_ne!(st, SvStatus::Ok);
    assert!(vine.is_null());
    assert!(!last_error().is_empty());

    let st = unsafe { sv_vine_fit(bad.as_ptr(), 2, 2, 9, 2, 4, 4, 0.05, &mut vine) };
    assert_eq!(st, SvStatus::InvalidArgument);
    assert!(last_error().contains("mode"));

    let st = unsafe { sv_vine_fit(ptr::null(), 2, 2, SV_MODE_SIMPA, 2, 4, 4, 0.05, &mut vine) };
    assert_eq!(st, SvStatus::NullPointer);

    let missing = CString::new("/nonexistent/model.json").unwrap();
    assert_eq!(unsafe { sv_vine_load(missing.as_ptr(), &mut vine) }, SvStatus::Io);

    let spec = CString::new("frank:p=3,case=b,beta=0.6").unwrap();
    let mut out = [0.0; 4];
    let st = unsafe { sv_simulate(spec.as_ptr(), 2, 2, 1, 0, out.as_mut_ptr()) };
    assert_eq!(st, SvStatus::DimensionMismatch);

    // truncated copy still terminates the string
    let mut buf = [1 as c_char; 4];
    let full = unsafe { sv_last_error(buf.as_mut_ptr(), buf.len()) };
    assert!(full > 3);
    assert_eq!(buf[3], 0);
}

#[test]
fn dimension_mismatch_on_evaluation() {
    let n = 300;
    let data = simulate(n);
    let mut vine = ptr::null_mut();
    assert_eq!(unsafe { sv_vine_fit(data.as_ptr(), n, 3, SV_MODE_SIMPA, 2, 4, 4, 0.05, &mut vine) }, SvStatus::Ok);
    let pts = [0.2, 0.5];
    let mut out = [0.0];
    let st = unsafe { sv_vine_log_density(vine, pts.as_ptr(), 1, 2, out.as_mut_ptr()) };
    assert_eq!(st, SvStatus::DimensionMismatch);
    unsafe { sv_vine_free(vine) };
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/splinevine.h");
    let text = std::fs::read_to_string(header).unwrap();
    for f in ["sv_vine_fit", "sv_vine_load", "sv_vine_save", "sv_vine_log_density", "sv_vine_free", "sv_last_error", "sv_simulate"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        format!(
            "#include \"{header}\"\nint main(void) {{ SvVine *v = 0; double u[3] = {{0.5, 0.5, 0.5}}; double o;\n\
             SvStatus s = sv_vine_log_density(v, u, 1, 3, &o); sv_vine_free(v); return s == SV_STATUS_OK; }}\n"
        ),
    )
    .unwrap();
    match Command::new("cc").args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only"]).arg(&src).status() {
        Ok(st) => assert!(st.success(), "header failed to compile"),
        Err(_) => eprintln!("no C compiler found; skipped"),
    }
}
