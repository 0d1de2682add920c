use think3d::error::Error;
use think3d::task::render::render_with_owners;
use think3d::task::scene::{ColorClass, SceneObject, ShapeClass};
use think3d::task::{generate_scene, render_views, GridScene, SceneConfig, ViewId};
use think3d::teacher::{dominant_objects, teacher_features, TeacherSpec, INJECTIVITY_FLOOR};

const SIDE: usize = 32;

fn obj(shape: ShapeClass, color: ColorClass, x: usize, y: usize, z: usize) -> SceneObject {
    SceneObject { shape, color, x, y, z }
}

/// Recomputes a patch feature from raw coordinates.
fn oracle_feature(o: &SceneObject) -> Vec<f64> {
    let b = 0.5 / 64f64.sqrt();
    let mut v = Vec::new();
    for c in [o.x, o.y, o.z] {
        for j in 0..8 {
            let w = 0.25 * 2f64.powi(j);
            v.push(0.5 * (w * c as f64).sin() + b);
            v.push(0.5 * (w * c as f64).cos() + b);
        }
    }
    for i in 0..16 {
        v.push(b + if i == o.shape.index() * 4 + o.color.index() { 0.5 } else { 0.0 });
    }
    v
}

fn close(a: &[f32], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (*x as f64 - y).abs() < 1e-6)
}

#[test]
fn empty_patches_get_the_baseline() {
    let s = GridScene {
        width: 8,
        height: 8,
        objects: vec![
            obj(ShapeClass::Cube, ColorClass::Red, 0, 0, 0),
            obj(ShapeClass::Sphere, ColorClass::Blue, 7, 7, 0),
        ],
    };
    let spec = TeacherSpec::default();
    let views = render_views(&s, &ViewId::ALL, SIDE);
    let f = teacher_features(&s, &views, None, &spec).unwrap();
    let baseline = vec![0.5 / 8.0; 64];
    let mut empty = 0;
    for v in 0..4 {
        let (_, owners) = render_with_owners(&s, ViewId::ALL[v], SIDE);
        for (p, dom) in dominant_objects(&owners, SIDE, 8, 2).iter().enumerate() {
            if dom.is_none() {
                empty += 1;
                assert!(close(f.patch(v, p), &baseline));
            }
        }
    }
    assert!(empty > 0);
}

#[test]
fn geometry_is_view_consistent() {
    let spec = TeacherSpec::default();
    for seed in 0..50 {
        let s = generate_scene(seed, &SceneConfig::default()).unwrap();
        let views = render_views(&s, &ViewId::ALL, SIDE);
        let f = teacher_features(&s, &views, None, &spec).unwrap();
        for v in 0..4 {
            let (_, owners) = render_with_owners(&s, ViewId::ALL[v], SIDE);
            for (p, dom) in dominant_objects(&owners, SIDE, 8, s.objects.len()).iter().enumerate() {
                if let Some(i) = dom {
                    // Same object, any view: the same world-frame encoding.
                    assert!(close(f.patch(v, p), &oracle_feature(&s.objects[*i])), "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn height_change_only_touches_that_objects_patches() {
    let cfg = SceneConfig::default();
    for seed in 0..50 {
        let a = generate_scene(seed, &cfg).unwrap();
        let mut b = a.clone();
        b.objects[0].z = (a.objects[0].z + 1) % (cfg.max_z + 1);
        let spec = TeacherSpec::default();
        let fa = teacher_features(&a, &render_views(&a, &ViewId::ALL, SIDE), None, &spec).unwrap();
        let fb = teacher_features(&b, &render_views(&b, &ViewId::ALL, SIDE), None, &spec).unwrap();
        let mut changed = 0;
        for v in 0..4 {
            let (_, oa) = render_with_owners(&a, ViewId::ALL[v], SIDE);
            let (_, ob) = render_with_owners(&b, ViewId::ALL[v], SIDE);
            for p in 0..16 {
                let (pr, pc) = (p / 4, p % 4);
                let touches = |owners: &[Option<usize>]| {
                    (pr * 8..pr * 8 + 8).any(|r| (pc * 8..pc * 8 + 8).any(|c| owners[r * SIDE + c] == Some(0)))
                };
                if fa.patch(v, p) != fb.patch(v, p) {
                    changed += 1;
                    assert!(touches(&oa) || touches(&ob), "seed {seed} view {v} patch {p}");
                }
            }
        }
        assert!(changed > 0, "seed {seed}");
    }
}

#[test]
fn encodings_are_injective_on_the_grid() {
    let spec = TeacherSpec::default();
    let mut enc = Vec::new();
    for x in 0..8 {
        for y in 0..8 {
            for z in 0..4 {
                enc.push(spec.encode_object(&obj(ShapeClass::Cube, ColorClass::Red, x, y, z)));
            }
        }
    }
    let mut min = f64::INFINITY;
    for i in 0..enc.len() {
        for j in 0..i {
            let d = enc[i].iter().zip(&enc[j]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            min = min.min(d);
        }
    }
    assert!(min >= INJECTIVITY_FLOOR, "{min}");
}

#[test]
fn norms_are_bounded_and_positive() {
    let spec = TeacherSpec::default();
    for seed in 0..20 {
        let s = generate_scene(seed, &SceneConfig::default()).unwrap();
        let f = teacher_features(&s, &render_views(&s, &ViewId::ALL, SIDE), None, &spec).unwrap();
        for v in 0..f.n_views {
            for p in 0..f.patches {
                let n = f.patch(v, p).iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt();
                assert!(n > 0.0 && n <= 10.0);
            }
        }
    }
}

#[test]
fn unknown_or_foreign_views_are_rejected() {
    let spec = TeacherSpec::default();
    let s = generate_scene(1, &SceneConfig::default()).unwrap();
    let views = render_views(&s, &[ViewId::North, ViewId::East], SIDE);
    let err = teacher_features(&s, &views, Some(&[ViewId::South]), &spec);
    assert!(matches!(err, Err(Error::ViewSceneMismatch(_))));
    let other = generate_scene(2, &SceneConfig::default()).unwrap();
    let err = teacher_features(&other, &views, None, &spec);
    assert!(matches!(err, Err(Error::ViewSceneMismatch(_))));
    let f = teacher_features(&s, &views, Some(&[ViewId::East]), &spec).unwrap();
    assert_eq!(f.n_views, 1);
}
