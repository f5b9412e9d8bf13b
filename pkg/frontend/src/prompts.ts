// Prompt templates for text queries. The defaults are the standard
// seven-prompt CLIP ensemble (the "best 7" subset distilled from the
// 80-template ImageNet set); swap them through the config when a corpus
// calls for different phrasing.

export const DEFAULT_TEMPLATES: readonly string[] = [
  'itap of a {}.',
  'a bad photo of the {}.',
  'a origami {}.',
  'a photo of the large {}.',
  'a {} in a video game.',
  'art of the {}.',
  'a photo of the small {}.',
];

export function fillTemplate(template: string, name: string): string {
  if (!template.includes('{}')) {
    throw new Error(`template ${JSON.stringify(template)} has no {} slot`);
  }
  return template.split('{}').join(name);
}
