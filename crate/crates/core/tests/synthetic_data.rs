//! The synthetic two-class task must stay learnable but not trivially so.

use fernnet::io::{knn_accuracy, synthesize};

#[test]
fn nearest_neighbours_separate_the_classes_well_but_not_perfectly() {
    let train = synthesize(1024, 1).unwrap();
    let test = synthesize(512, 2).unwrap();
    let acc = knn_accuracy(&train, &test, 3).unwrap();
    // measured 0.84 when the generator was tuned; a drop below 0.8 means the
    // textures have drifted, 1.0 means a class leaks through a trivial cue
    assert!(acc >= 0.80, "3-NN accuracy {acc}");
    assert!(acc < 0.99, "3-NN accuracy {acc}");
}
