// SPDX-License-Identifier: Apache-2.0
#include "starft/prompts.hpp"

namespace starft {

const ConceptBank& bundled_bank() {
  static const ConceptBank bank({
      {"background",
       {
           "{class} surrounded by flowers",
           "{class} in urban settings",
           "{class} surrounded by greenery",
           "{class} in snowy landscapes",
           "{class} in a rainforest",
           "{class} on busy roads and highways",
           "{class} in the mountains",
           "{class} in parks and gardens",
           "{class} in front of historical landmarks",
           "{class} in fields",
           "{class} in the forest and woods",
           "{class} in the snow",
           "{class} on the beach",
           "{class} in a farmland",
           "{class} on the sand and beach",
           "{class} with animals in the frame",
           "{class} in entertainment centers",
           "{class} in a suburban area",
           "{class} under a blue sky",
           "{class} surrounded by butterflies",
           "{class} with clouds in the background",
           "{class} in cloudy weather",
           "{class} in the desert",
           "{class} among rocks",
           "{class} in a forest",
           "{class} in an industrial setting",
           "{class} in residential areas",
           "{class} in sports stadiums and arenas",
           "{class} during sunset",
           "{class} surrounded by trees",
       }},
      {"texture",
       {
           "{class} with a rough texture",
           "{class} with a smooth surface",
           "{class} feeling soft to the touch",
           "{class} that is hard",
           "{class} with a fuzzy texture",
           "{class} with prickly features",
           "{class} with a bumpy surface",
           "{class} appearing fluffy",
           "{class} with silky textures",
           "{class} shining brightly",
           "{class} with a matte finish",
           "{class} with wavy patterns",
           "{class} with knotty features",
           "{class} with lumpy textures",
           "{class} with a sleek appearance",
       }},
      {"resolution",
       {
           "blurred {class}",
           "blurry {class}",
           "{class} with brightness",
           "dark {class}",
           "distorted {class}",
           "high resolution of {class}",
           "low resolution of {class}",
           "overexposed {class}",
           "underexposed {class}",
           "{class} with shadow",
           "{class} with low visibility",
           "{class} with inconsistent lighting",
           "cropped {class}",
           "{class} with cropping",
           "monochrome {class}",
       }},
  });
  return bank;
}

}  // namespace starft
