use cascade_seg::phantom::{generate_phantom, PhantomConfig};

const GOLDEN: &str = include_str!("golden/phantom_default_seed0_counts.txt");

#[test]
fn default_phantom_class_counts() {
    let (_, labels) = generate_phantom(&PhantomConfig::default()).unwrap();
    let counts = labels.class_counts();
    let expected: Vec<usize> = GOLDEN
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| l.split_once(' ').expect("class count pair").1.trim().parse().unwrap())
        .collect();
    assert_eq!(counts, expected);
    assert_eq!(counts.iter().sum::<usize>(), 64 * 64 * 64);
}
