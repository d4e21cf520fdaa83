#pragma once

#include "s3o/error.hpp"
#include "s3o/geom.hpp"
#include "s3o/image.hpp"
#include "s3o/spatial.hpp"
#include "s3o/silhouette_skeleton.hpp"
#include "s3o/skeleton.hpp"
#include "s3o/skeleton_lift.hpp"
#include "s3o/skinning.hpp"
#include "s3o/rigidity.hpp"
#include "s3o/renderer.hpp"
#include "s3o/bone_motion.hpp"
#include "s3o/skeleton_refine.hpp"
#include "s3o/losses.hpp"
#include "s3o/parallel.hpp"
#include "s3o/synth.hpp"
#include "s3o/optimizer.hpp"
#include "s3o/cli.hpp"
