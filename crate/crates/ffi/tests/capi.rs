use std::ffi::{CStr, CString};
use std::ptr;

use clickseg::io::save_checkpoint;
use clickseg::model::{ModelConfig, ModelParams};
use clickseg_ffi::*;

fn tiny_json() -> CString {
    CString::new(serde_json::to_string(&ModelConfig::tiny(2)).unwrap()).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    let n = unsafe { clickseg_last_error_message(buf.as_mut_ptr(), buf.len()) };
    if n == 0 {
        return String::new();
    }
    unsafe { CStr::from_ptr(buf.as_ptr()) }
        .to_string_lossy()
        .into_owned()
}

fn two_blobs() -> Vec<f64> {
    let mut pts = Vec::new();
    for i in 0..40 {
        let t = i as f64 * 0.1;
        pts.extend([t.sin() * 0.2, t.cos() * 0.2, 0.01 * i as f64]);
        pts.extend([3.0 + t.cos() * 0.2, t.sin() * 0.2, 0.01 * i as f64]);
    }
    pts
}

fn new_model() -> *mut ClicksegModel {
    let cfg = tiny_json();
    let mut model = ptr::null_mut();
    let status = unsafe { clickseg_model_new(cfg.as_ptr(), &mut model) };
    assert_eq!(status, ClicksegStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn segment_round_trip() {
    let model = new_model();
    assert!(unsafe { clickseg_model_num_parameters(model) } > 0);

    let pts = two_blobs();
    let n = pts.len() / 3;
    let clicks = [pts[0], pts[1], pts[2], pts[3], pts[4], pts[5]];
    let groups = [0i64, 1];
    let mut result = ptr::null_mut();
    let status = unsafe {
        clickseg_segment(
            model,
            pts.as_ptr(),
            ptr::null(),
            n,
            clicks.as_ptr(),
            groups.as_ptr(),
            2,
            &mut result,
        )
    };
    assert_eq!(status, ClicksegStatus::Ok, "{}", last_error());
    unsafe {
        assert_eq!(clickseg_result_num_points(result), n);
        let inst = std::slice::from_raw_parts(clickseg_result_point_instance(result), n);
        let class = std::slice::from_raw_parts(clickseg_result_point_class(result), n);
        assert!(inst.iter().all(|&g| (-1..=1).contains(&g)));
        assert!(inst
            .iter()
            .zip(class)
            .all(|(&g, &c)| (g == -1) == (c == -1)));
        assert_eq!(clickseg_result_num_groups(result), 2);
        assert_eq!(
            std::slice::from_raw_parts(clickseg_result_groups(result), 2),
            &[0, 1]
        );

        let mut json = ptr::null_mut();
        assert_eq!(
            clickseg_result_to_json(result, &mut json),
            ClicksegStatus::Ok
        );
        let text = CStr::from_ptr(json).to_str().unwrap().to_owned();
        clickseg_string_free(json);
        let parsed = clickseg::pipeline::SegmentationResult::from_json(&text).unwrap();
        assert_eq!(parsed.point_instance, inst);

        clickseg_result_free(result);
        clickseg_model_free(model);
    }
}

#[test]
fn error_codes() {
    let model = new_model();
    let pts = two_blobs();
    let mut result = ptr::null_mut();
    unsafe {
        let s = clickseg_segment(
            ptr::null(),
            pts.as_ptr(),
            ptr::null(),
            80,
            ptr::null(),
            ptr::null(),
            0,
            &mut result,
        );
        assert_eq!(s, ClicksegStatus::NullPointer);
        assert!(last_error().contains("model"));

        let s = clickseg_segment(
            model,
            pts.as_ptr(),
            ptr::null(),
            80,
            ptr::null(),
            ptr::null(),
            0,
            &mut result,
        );
        assert_eq!(s, ClicksegStatus::NoClicks, "{}", last_error());
        assert!(result.is_null());

        let bad = [f64::NAN; 3];
        let click = [0.0; 3];
        let s = clickseg_segment(
            model,
            bad.as_ptr(),
            ptr::null(),
            1,
            click.as_ptr(),
            [0i64].as_ptr(),
            1,
            &mut result,
        );
        assert_eq!(s, ClicksegStatus::InvalidInput);
        assert!(!last_error().is_empty());

        let garbage = CString::new("{not json").unwrap();
        let mut m2 = ptr::null_mut();
        assert_eq!(
            clickseg_model_new(garbage.as_ptr(), &mut m2),
            ClicksegStatus::Parse
        );

        let missing = CString::new("/nonexistent/clickseg.ckpt").unwrap();
        assert_eq!(
            clickseg_model_load(missing.as_ptr(), &mut m2),
            ClicksegStatus::Io
        );
        assert!(m2.is_null());

        clickseg_model_free(ptr::null_mut());
        clickseg_result_free(ptr::null_mut());
        clickseg_string_free(ptr::null_mut());
        assert_eq!(clickseg_model_num_parameters(ptr::null()), 0);
        assert!(clickseg_result_point_instance(ptr::null()).is_null());
        clickseg_model_free(model);
    }
}

#[test]
fn truncated_error_message() {
    let mut m = ptr::null_mut();
    unsafe {
        assert_eq!(
            clickseg_model_new(ptr::null(), &mut m),
            ClicksegStatus::NullPointer
        );
        let mut buf = [1 as std::ffi::c_char; 4];
        let full = clickseg_last_error_message(buf.as_mut_ptr(), buf.len());
        assert!(full > 3);
        assert_eq!(buf[3], 0);
        assert_eq!(CStr::from_ptr(buf.as_ptr()).to_bytes().len(), 3);
    }
}

#[test]
fn load_checkpoint_file() {
    let params = ModelParams::new(ModelConfig::tiny(2)).unwrap();
    let path = std::env::temp_dir().join(format!("clickseg-ffi-{}.ckpt", std::process::id()));
    save_checkpoint(&params, &path).unwrap();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    let status = unsafe { clickseg_model_load(c_path.as_ptr(), &mut model) };
    std::fs::remove_file(&path).ok();
    assert_eq!(status, ClicksegStatus::Ok, "{}", last_error());
    assert_eq!(
        unsafe { clickseg_model_num_parameters(model) },
        params.num_parameters()
    );
    unsafe { clickseg_model_free(model) };
}

#[test]
fn header_lists_exports() {
    let header =
        std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/clickseg.h"))
            .unwrap();
    for name in [
        "clickseg_version",
        "clickseg_last_error_message",
        "clickseg_model_load",
        "clickseg_model_new",
        "clickseg_model_free",
        "clickseg_segment",
        "clickseg_result_point_instance",
        "clickseg_result_to_json",
        "clickseg_string_free",
        "typedef struct ClicksegModel ClicksegModel",
        "CLICKSEG_STATUS_NO_CLICKS = 3",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
    let v = unsafe { CStr::from_ptr(clickseg_version()) }
        .to_str()
        .unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}
