#pragma once

#include "protoformer/apae.hpp"
#include "protoformer/augment.hpp"
#include "protoformer/autograd.hpp"
#include "protoformer/checkpoint.hpp"
#include "protoformer/config.hpp"
#include "protoformer/dataset.hpp"
#include "protoformer/diagnose.hpp"
#include "protoformer/error.hpp"
#include "protoformer/evaluate.hpp"
#include "protoformer/hungarian.hpp"
#include "protoformer/image.hpp"
#include "protoformer/losses.hpp"
#include "protoformer/model.hpp"
#include "protoformer/nn.hpp"
#include "protoformer/optimizer.hpp"
#include "protoformer/ppad.hpp"
#include "protoformer/synth.hpp"
#include "protoformer/train.hpp"
#include "protoformer/unified_landmarks.hpp"
