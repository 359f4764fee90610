pub mod dynamics;
pub mod pid;
pub mod nn;
pub mod env;
pub mod seed;
pub mod td3;
pub mod disturbance;
pub mod nav;
pub mod trajectory;
pub mod pidtune;
pub mod evaluation;
