pub mod colorimetry;
pub mod gaze;
pub mod psychometry;
pub mod session;
pub mod stimulus;
pub mod vibration;
