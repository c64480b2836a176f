#pragma once

#include "rawsplat/camera.hpp"
#include "rawsplat/color_field.hpp"
#include "rawsplat/config.hpp"
#include "rawsplat/csi.hpp"
#include "rawsplat/dataset.hpp"
#include "rawsplat/evaluation.hpp"
#include "rawsplat/io.hpp"
#include "rawsplat/losses.hpp"
#include "rawsplat/metrics.hpp"
#include "rawsplat/optimizer.hpp"
#include "rawsplat/postprocess.hpp"
#include "rawsplat/protocol.hpp"
#include "rawsplat/rasterizer.hpp"
#include "rawsplat/scene.hpp"
#include "rawsplat/splat.hpp"
#include "rawsplat/synthetic.hpp"
#include "rawsplat/trainer.hpp"
#include "rawsplat/types.hpp"
