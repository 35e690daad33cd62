//! Object analogues named after YCB items. Dimensions are approximate.

use crate::world::{SceneObject, Shape};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CatalogItem {
    pub name: &'static str,
    pub shape: Shape,
    pub graspable: bool,
}

const fn cyl(name: &'static str, r: f64, h: f64) -> CatalogItem {
    CatalogItem {
        name,
        shape: Shape::Cylinder { r, h },
        graspable: true,
    }
}

const fn cuboid(name: &'static str, w: f64, d: f64, h: f64) -> CatalogItem {
    CatalogItem {
        name,
        shape: Shape::Box { w, d, h },
        graspable: true,
    }
}

pub const FOOD: [CatalogItem; 12] = [
    cyl("chips_can", 0.0375, 0.25),
    cyl("master_chef_can", 0.051, 0.14),
    cuboid("cracker_box", 0.16, 0.06, 0.21),
    cuboid("sugar_box", 0.09, 0.038, 0.175),
    cyl("tomato_soup_can", 0.033, 0.101),
    cuboid("mustard_bottle", 0.095, 0.058, 0.19),
    cyl("tuna_fish_can", 0.0425, 0.033),
    cuboid("pudding_box", 0.11, 0.089, 0.035),
    cuboid("gelatin_box", 0.085, 0.073, 0.028),
    cuboid("potted_meat_can", 0.10, 0.05, 0.083),
    cuboid("banana", 0.19, 0.036, 0.036),
    cyl("apple", 0.038, 0.07),
];

pub const TOOLS: [CatalogItem; 10] = [
    cuboid("power_drill", 0.18, 0.06, 0.19),
    cuboid("wood_block", 0.085, 0.085, 0.2),
    cuboid("scissors", 0.2, 0.08, 0.015),
    cuboid("large_marker", 0.12, 0.018, 0.018),
    cuboid("adjustable_wrench", 0.2, 0.05, 0.012),
    cuboid("phillips_screwdriver", 0.2, 0.031, 0.031),
    cuboid("hammer", 0.33, 0.1, 0.035),
    cuboid("spring_clamp", 0.2, 0.09, 0.03),
    cyl("mini_soccer_ball", 0.07, 0.14),
    CatalogItem {
        name: "washer",
        shape: Shape::Cylinder { r: 0.015, h: 0.004 },
        graspable: true,
    },
];

pub const CUP_COLORS: [&str; 3] = ["red", "green", "blue"];

pub fn cup(color: &str) -> CatalogItem {
    CatalogItem {
        name: match color {
            "red" => "cup_red",
            "green" => "cup_green",
            _ => "cup_blue",
        },
        shape: Shape::Cylinder { r: 0.035, h: 0.075 },
        graspable: true,
    }
}

pub fn bin(color: &str) -> CatalogItem {
    CatalogItem {
        name: match color {
            "red" => "bin_red",
            "green" => "bin_green",
            _ => "bin_blue",
        },
        shape: Shape::Box { w: 0.2, d: 0.2, h: 0.06 },
        graspable: false,
    }
}

pub fn lookup(name: &str) -> Option<CatalogItem> {
    FOOD.iter()
        .chain(TOOLS.iter())
        .find(|c| c.name == name)
        .copied()
        .or_else(|| {
            CUP_COLORS.iter().find_map(|c| {
                if cup(c).name == name {
                    Some(cup(c))
                } else if bin(c).name == name {
                    Some(bin(c))
                } else {
                    None
                }
            })
        })
}

impl CatalogItem {
    pub fn place(&self, id: u32, position: [f64; 2], yaw: f64, support_height: f64) -> SceneObject {
        SceneObject {
            id,
            class_label: self.name.to_string(),
            shape: self.shape,
            position,
            yaw,
            support_height,
            graspable: self.graspable,
            clutter_group: None,
        }
    }
}
