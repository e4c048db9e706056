use std::ffi::{CStr, CString};
use std::ptr;

use lls_ffi::*;

fn last_error() -> String {
    let p = lls_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn exact_pipeline_through_the_abi() {
    unsafe {
        let levels = [2usize, 3, 2, 2, 3, 2];
        let mut schema = ptr::null_mut();
        assert_eq!(lls_schema_new(levels.as_ptr(), levels.len(), &mut schema), LlsStatus::Ok);
        assert_eq!(lls_schema_num_vars(schema), 6);
        assert_eq!(lls_schema_total_cells(schema), 14);

        let mut model = ptr::null_mut();
        assert_eq!(lls_model_generate(schema, 2, 3, 8, &mut model), LlsStatus::Ok);
        let mut matrix = ptr::null_mut();
        assert_eq!(lls_moment_matrix_from_model(model, 2, &mut matrix), LlsStatus::Ok);
        let (mut rows, mut cols) = (0, 0);
        assert_eq!(lls_moment_matrix_shape(matrix, &mut rows, &mut cols), LlsStatus::Ok);
        assert_eq!(rows, 14);
        assert!(cols > 0);

        let mut basis = ptr::null_mut();
        let mut summary = LlsPlaneSummary::default();
        assert_eq!(lls_estimate_plane(matrix, ptr::null(), &mut basis, &mut summary), LlsStatus::Ok);
        assert_eq!(summary.k, 2);
        assert_eq!(lls_basis_k(basis), 2);

        let mut needed = 0;
        assert_eq!(
            lls_basis_copy_vectors(basis, ptr::null_mut(), 0, &mut needed),
            LlsStatus::InvalidArgument
        );
        assert_eq!(needed, 28);
        let mut buf = vec![0.0; needed];
        assert_eq!(lls_basis_copy_vectors(basis, buf.as_mut_ptr(), buf.len(), &mut needed), LlsStatus::Ok);
        // Each basis vector sums to one within every variable block.
        assert!((buf[0] + buf[1] - 1.0).abs() < 1e-9);

        let mut truth = ptr::null_mut();
        assert_eq!(lls_model_basis(model, &mut truth), LlsStatus::Ok);
        let mut angles = [0.0f64; 2];
        let mut n = 0;
        assert_eq!(lls_principal_angles(basis, truth, angles.as_mut_ptr(), 2, &mut n), LlsStatus::Ok);
        assert_eq!(n, 2);
        assert!(angles.iter().all(|a| *a < 1e-8));

        let targets = [1u32, 2, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        let mut table = ptr::null_mut();
        assert_eq!(
            lls_conditional_moments(basis, ptr::null(), model, targets.as_ptr(), 2, 1, 10.0, &mut table),
            LlsStatus::Ok
        );
        assert!(lls_moment_table_len(table) > 0);
        assert!(lls_moment_table_residual_norm(table) < 1e-9);
        let (mut a, mut b) = (0.0, 0.0);
        assert_eq!(lls_moment_table_conditional(table, targets.as_ptr(), [1u32, 0].as_ptr(), &mut a), LlsStatus::Ok);
        assert_eq!(lls_moment_table_conditional(table, targets.as_ptr(), [0u32, 1].as_ptr(), &mut b), LlsStatus::Ok);
        assert!((a + b - 1.0).abs() < 1e-8);

        let mut data = ptr::null_mut();
        assert_eq!(lls_model_sample(model, 500, 1, &mut data), LlsStatus::Ok);
        assert_eq!(lls_dataset_n(data), 500);

        lls_moment_table_free(table);
        lls_dataset_free(data);
        lls_basis_free(truth);
        lls_basis_free(basis);
        lls_moment_matrix_free(matrix);
        lls_model_free(model);
        lls_schema_free(schema);
    }
}

#[test]
fn errors_set_status_and_message() {
    unsafe {
        let mut schema = ptr::null_mut();
        assert_eq!(lls_schema_new([2usize, 1].as_ptr(), 2, &mut schema), LlsStatus::Data);
        assert!(last_error().contains("level"));
        assert!(schema.is_null());

        assert_eq!(lls_schema_new(ptr::null(), 3, &mut schema), LlsStatus::InvalidArgument);
        assert!(last_error().contains("null"));

        let missing = CString::new("/nonexistent/schema.json").unwrap();
        assert_eq!(lls_schema_load(missing.as_ptr(), &mut schema), LlsStatus::Data);

        assert_eq!(lls_schema_new([2usize, 2, 2].as_ptr(), 3, &mut schema), LlsStatus::Ok);
        assert!(lls_last_error_message().is_null());
        let mut model = ptr::null_mut();
        assert_eq!(lls_model_generate(schema, 9, 9, 0, &mut model), LlsStatus::Data);

        let bad = [3u32, 0, 0];
        let mut d = ptr::null_mut();
        assert_eq!(lls_dataset_from_rows(schema, bad.as_ptr(), 1, &mut d), LlsStatus::Data);

        lls_schema_free(schema);
        lls_schema_free(ptr::null_mut());
    }
}

#[test]
fn file_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("b.json").to_str().unwrap()).unwrap();
    unsafe {
        let mut schema = ptr::null_mut();
        assert_eq!(lls_schema_new([2usize, 2, 2, 2].as_ptr(), 4, &mut schema), LlsStatus::Ok);
        let mut model = ptr::null_mut();
        assert_eq!(lls_model_generate(schema, 1, 2, 3, &mut model), LlsStatus::Ok);
        let mut basis = ptr::null_mut();
        assert_eq!(lls_model_basis(model, &mut basis), LlsStatus::Ok);
        assert_eq!(lls_basis_save(basis, path.as_ptr()), LlsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(lls_basis_load(path.as_ptr(), &mut back), LlsStatus::Ok);
        assert_eq!(lls_basis_k(back), 1);
        lls_basis_free(back);
        lls_basis_free(basis);
        lls_model_free(model);
        lls_schema_free(schema);
    }
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(lls_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
