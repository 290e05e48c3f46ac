pub mod numerics;
pub mod synthdata;
pub mod detector;
pub mod synthesis;
pub mod evalkit;
pub mod pipeline;
