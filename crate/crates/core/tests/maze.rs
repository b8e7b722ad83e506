use std::collections::HashSet;

use memstream::maze::*;
use memstream::Error;
use proptest::prelude::*;

fn open_room() -> MazeSpec {
    MazeSpec {
        width: 13,
        height: 7,
        door: (6, 3),
        wall_hue: PALETTE[2],
        objects: vec![MazeObject {
            x: 10,
            y: 5,
            color: PALETTE[5],
        }],
        seed: 0,
    }
}

/// Pixel span covered by crop cell `i` under nearest-cell sampling.
fn band(i: usize) -> Vec<usize> {
    (0..FRAME)
        .filter(|&p| {
            let lo = i as f64 * FRAME as f64 / VIEW as f64;
            let hi = (i + 1) as f64 * FRAME as f64 / VIEW as f64;
            (p as f64) >= lo - 1e-9 && (p as f64) < hi - 1e-9
        })
        .collect()
}

fn px(img: &[u8], y: usize, x: usize) -> [u8; 3] {
    img[(y * FRAME + x) * 3..][..3].try_into().unwrap()
}

#[test]
fn wall_ahead_fills_known_tile_band() {
    let spec = open_room();
    // Facing north at the top-left floor cell: the wall row is one step ahead.
    let img = render_bytes(&spec, Pose { x: 1, y: 1, heading: 0 });
    let (rows, cols) = (band(VIEW / 2 - 1), band(VIEW / 2));
    assert_eq!(rows, (11..=14).collect::<Vec<_>>());
    assert_eq!(cols, (15..=17).collect::<Vec<_>>());
    for &y in &rows {
        for &x in &cols {
            assert_eq!(px(&img, y, x), spec.wall_hue, "pixel ({y}, {x})");
        }
    }
    // Two cells ahead lies outside the grid.
    for &y in &band(VIEW / 2 - 2) {
        assert_eq!(px(&img, y, 16), VOID);
    }
    assert_eq!(px(&img, 16, 16), AGENT);
}

#[test]
fn content_outside_the_crop_is_invisible() {
    let mut spec = MazeSpec {
        width: 30,
        height: 7,
        door: (15, 3),
        ..open_room()
    };
    let pose = Pose { x: 2, y: 3, heading: 1 };
    let before = render_bytes(&spec, pose);
    spec.objects = vec![MazeObject {
        x: 25,
        y: 3,
        color: PALETTE[7],
    }];
    assert_eq!(render_bytes(&spec, pose), before);
    spec.objects = vec![MazeObject {
        x: 5,
        y: 3,
        color: PALETTE[7],
    }];
    assert_ne!(render_bytes(&spec, pose), before);
}

#[test]
fn observations_lie_in_unit_interval() {
    let ep = generate_episode(11, 20).unwrap();
    for i in 0..ep.len() {
        let t = ep.frame_tensor(i);
        assert_eq!(t.shape(), &[3, FRAME, FRAME]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    assert_eq!(render_observation(&ep.spec, ep.poses[3]), ep.frame_tensor(3));
}

#[test]
fn episode_file_round_trip_and_truncation() {
    let eps: Vec<_> = (0..3).map(|s| generate_episode(100 + s, 24).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("eps.mmep");
    write_episodes(&path, &eps).unwrap();
    assert_eq!(read_episodes(&path).unwrap(), eps);

    let bytes = std::fs::read(&path).unwrap();
    let cut = &bytes[..bytes.len() - 100];
    assert!(matches!(decode_episodes(cut, "cut"), Err(Error::Checksum { .. })));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(matches!(decode_episodes(&bad_magic, "m"), Err(Error::Format { .. })));
}

#[test]
fn identical_seeds_give_identical_file_bytes() {
    let a: Vec<_> = (0..2).map(|s| generate_episode(s, 32).unwrap()).collect();
    let b: Vec<_> = (0..2).map(|s| generate_episode(s, 32).unwrap()).collect();
    assert_eq!(encode_episodes(&a), encode_episodes(&b));
}

#[test]
fn every_palette_color_appears_as_a_wall_hue() {
    let hues: HashSet<[u8; 3]> = (0..512).map(|s| generate_episode(s, 2).unwrap().spec.wall_hue).collect();
    assert_eq!(hues.len(), PALETTE.len());
}

#[test]
fn different_seeds_mostly_differ_in_hue() {
    let same = (0..200u64)
        .filter(|&s| generate_episode(2 * s, 2).unwrap().spec.wall_hue == generate_episode(2 * s + 1, 2).unwrap().spec.wall_hue)
        .count();
    // Expected 25 of 200 under independent uniform hues.
    assert!(same <= 45, "{same} of 200 pairs share a hue");
}

fn cell_distance(a: Pose, b: Pose) -> i16 {
    (a.x - b.x).abs() + (a.y - b.y).abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_are_collision_free_and_consistent(seed in any::<u64>(), t in 2usize..80) {
        let ep = generate_episode(seed, t).unwrap();
        prop_assert_eq!(ep.frames.len(), t);
        prop_assert_eq!(ep.actions.len(), t);
        prop_assert_eq!(ep.poses.len(), t);
        for i in 0..t {
            let p = ep.poses[i];
            prop_assert!(ep.spec.is_floor(p.x, p.y));
            if i + 1 < t {
                prop_assert_eq!(ep.spec.step(p, ep.actions[i]), ep.poses[i + 1]);
            }
        }
        prop_assert_eq!(*ep.actions.last().unwrap(), Action::Stay);
    }

    #[test]
    fn long_episodes_close_the_loop(seed in any::<u64>(), t in 48usize..=96) {
        let ep = generate_episode(seed, t).unwrap();
        prop_assert!(cell_distance(ep.poses[0], *ep.poses.last().unwrap()) <= 2);
    }
}

#[test]
fn sixty_four_frame_episodes_return_near_start() {
    for seed in 0..64 {
        let ep = generate_episode(seed, 64).unwrap();
        assert!(cell_distance(ep.poses[0], ep.poses[63]) <= 2, "seed {seed}");
    }
}

#[test]
fn episodes_visit_both_rooms() {
    for seed in 0..32 {
        let ep = generate_episode(seed, 64).unwrap();
        let rooms: HashSet<u8> = ep.poses.iter().map(|p| ep.spec.room(p.x)).collect();
        assert!(rooms.contains(&0) && rooms.contains(&1), "seed {seed}");
    }
}
