//! Weight containers, images and label maps.

pub mod container;
pub mod image;

pub use container::{decode_container, encode_container, read_container, write_container, Container, Metadata};
pub use image::{load_image, load_label, save_color, save_label, Normalization, Palette};
