//! The server accepts uploads only: raw data types do not implement
//! `ServerInput`, and the aggregation entry points are bounded by it.

use std::marker::PhantomData;

use fedexdnn::data::{ClientShard, Segment, TrainSegment, Window};
use fedexdnn::model::{GlobalModel, LocalModel, ServerInput};

struct Probe<T>(PhantomData<T>);

trait Fallback {
    const IMPLS: bool = false;
}

impl<T> Fallback for Probe<T> {}

impl<T: ServerInput> Probe<T> {
    const IMPLS: bool = true;
}

#[test]
fn only_uploads_reach_the_server() {
    assert!(Probe::<LocalModel>::IMPLS);
    assert!(!Probe::<GlobalModel>::IMPLS);
    assert!(!Probe::<Segment>::IMPLS);
    assert!(!Probe::<TrainSegment>::IMPLS);
    assert!(!Probe::<Window>::IMPLS);
    assert!(!Probe::<ClientShard>::IMPLS);
    assert!(!Probe::<Vec<Segment>>::IMPLS);
}

#[test]
fn entry_points_are_bounded_by_server_input() {
    // these only compile because LocalModel: ServerInput
    let _: fn(&[LocalModel]) -> _ = fedexdnn::fedserver::fedavg_encoders::<LocalModel>;
    let _: fn(&[LocalModel]) -> _ = fedexdnn::fedserver::pool_exemplars::<LocalModel>;
}
