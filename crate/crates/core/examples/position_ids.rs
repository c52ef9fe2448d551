//! Naive vs shared frame position ids for a short clip with a text prompt.

use mmvl::fpid::{assign_positions, count_positions, PositionMode, Segment, SequenceLayout};
use mmvl::merger::merged_token_count;

fn main() {
    let per_frame = merged_token_count(24, 2);
    let mut segments = vec![Segment::Text(3)];
    segments.extend(std::iter::repeat(Segment::VisualFrame(per_frame)).take(4));
    segments.push(Segment::Text(2));
    let layout = SequenceLayout::new(segments);

    for mode in [PositionMode::Naive, PositionMode::SharedFpid] {
        let l = assign_positions(layout.clone(), mode);
        let ids = l.position_ids();
        let frame_starts: Vec<usize> = (0..4).map(|f| ids[3 + f * per_frame]).collect();
        println!(
            "{:<12} {} tokens, {} position ids; frames start at {:?}; trailing text at {:?}",
            mode.as_str(),
            l.len(),
            count_positions(&l, mode),
            frame_starts,
            &ids[ids.len() - 2..]
        );
    }

    // 30 frames of 144 merged tokens.
    let video = SequenceLayout::new(vec![Segment::VisualFrame(144); 30]);
    for mode in [PositionMode::Naive, PositionMode::SharedFpid] {
        println!("30-frame video, {}: {}", mode.as_str(), count_positions(&assign_positions(video.clone(), mode), mode));
    }
}
