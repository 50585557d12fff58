use gmc_core::config::{Preset, RunConfig};
use gmc_core::finescale::{finescale_compliance, force_loaded_layers, resolve_gmc, FinescaleConfig};
use gmc_core::macrosolver::MacroModel;
use gmc_core::mapping::PolyMap;
use gmc_core::unitcell::{builtin_cell, solid_fraction, BuiltinCell, CellRaster};
use gmc_core::Error;

fn small(mesh: [usize; 2], h: f64, layers: usize) -> (RunConfig, FinescaleConfig) {
    let mut cfg = RunConfig::preset(Preset::ShortBeamDistributed);
    cfg.problem.mesh = vec![40, 20];
    cfg.zones = vec![4, 2];
    let fc = FinescaleConfig { h, mesh: mesh.to_vec(), top_solid_layers: layers, ersatz: 1e-6 };
    (cfg, fc)
}

#[test]
fn solid_cell_reproduces_the_solid_beam() {
    let (cfg, fc) = small([64, 32], 0.25, 0);
    let raster = CellRaster::filled(2, 16, 1.0).unwrap();
    let mut fine = resolve_gmc(&PolyMap::identity(2), &raster, &fc, &cfg.problem).unwrap();
    assert_eq!(fine.solid_fraction(), 1.0);
    let base = cfg.base_tensor().unwrap();
    let (rep, _) = finescale_compliance(&mut fine, &cfg.problem, &fc, &base).unwrap();
    let mut p = cfg.problem.clone();
    p.mesh = fc.mesh.clone();
    let direct = MacroModel::new(&p).unwrap().solve(&[base], &vec![0; 64 * 32]).unwrap().compliance;
    assert!((rep.compliance - direct).abs() < 1e-12 * direct);
    assert!(!rep.degenerate);
}

#[test]
fn identity_map_tiles_the_cell() {
    // 16 fine elements per cell period: the resolved structure is the cell
    // raster subsampled at every fourth voxel, repeated.
    let (cfg, fc) = small([128, 64], 0.25, 0);
    let raster = builtin_cell(BuiltinCell::X2d, 0.3, 64).unwrap();
    let fine = resolve_gmc(&PolyMap::identity(2), &raster, &fc, &cfg.problem).unwrap();
    for e in 0..fine.solid.len() {
        let [i, j, _] = fine.grid.element_ijk(e);
        let (ci, cj) = (i % 16, j % 16);
        // Element centers sit at (c + 1/2)/16 of the period: voxel 4c + 2.
        let voxel = 4 * ci + 2 + 64 * (4 * cj + 2);
        assert_eq!(fine.solid[e], raster.is_solid(voxel), "element {e}");
    }
    assert!((fine.solid_fraction() - solid_fraction(&raster)).abs() < 0.03);
}

#[test]
fn degenerate_map_is_reported() {
    let (cfg, fc) = small([32, 16], 0.25, 0);
    let mut m = PolyMap::identity(2);
    // y2 = x2 - x2^2 has dy2/dx2 = 0 on the line x2 = 1/2.
    m.set_b(1, 1, 1, -2.0);
    let mut fc = fc;
    fc.mesh = vec![32, 17];
    let raster = builtin_cell(BuiltinCell::X2d, 0.3, 64).unwrap();
    let err = resolve_gmc(&m, &raster, &fc, &cfg.problem).unwrap_err();
    assert!(matches!(err, Error::DegenerateMap { .. }), "{err}");
}

#[test]
fn forcing_too_many_layers_is_rejected() {
    let (cfg, fc) = small([64, 32], 0.25, 2);
    let raster = builtin_cell(BuiltinCell::X2d, 0.3, 64).unwrap();
    let mut fine = resolve_gmc(&PolyMap::identity(2), &raster, &fc, &cfg.problem).unwrap();
    let err = finescale_compliance(&mut fine, &cfg.problem, &fc, &cfg.base_tensor().unwrap()).unwrap_err();
    assert!(err.to_string().contains("volume"), "{err}");
}

#[test]
fn forced_layers_only_touch_the_loaded_face() {
    let (cfg, fc) = small([64, 32], 0.25, 1);
    let raster = builtin_cell(BuiltinCell::X2d, 0.3, 64).unwrap();
    let mut fine = resolve_gmc(&PolyMap::identity(2), &raster, &fc, &cfg.problem).unwrap();
    let before = fine.clone();
    let changed = force_loaded_layers(&mut fine, &cfg.problem, 1);
    assert!(changed > 0);
    for e in 0..fine.solid.len() {
        let top = fine.grid.element_ijk(e)[1] == 31;
        assert_eq!(fine.solid[e], if top { true } else { before.solid[e] });
    }
}

#[test]
fn mismatched_dimensions_are_rejected() {
    let (cfg, fc) = small([32, 16], 0.25, 0);
    let raster = builtin_cell(BuiltinCell::OrthogonalCross3d, 0.3, 16).unwrap();
    assert!(resolve_gmc(&PolyMap::identity(2), &raster, &fc, &cfg.problem).is_err());
    let bad = FinescaleConfig { h: -1.0, ..fc };
    assert!(bad.validate(2).is_err());
}
