#pragma once

#include "mcr_stitch/aggregation.hpp"
#include "mcr_stitch/embedding_store.hpp"
#include "mcr_stitch/evaluation.hpp"
#include "mcr_stitch/experiment.hpp"
#include "mcr_stitch/losses.hpp"
#include "mcr_stitch/optimizer.hpp"
#include "mcr_stitch/projector.hpp"
#include "mcr_stitch/synth.hpp"
#include "mcr_stitch/training.hpp"
